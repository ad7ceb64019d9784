use crate::error::{shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sqrt(Var),
    Silu(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
        out_c: usize,
    },
    /// Normalization over contiguous groups (`GroupNorm`) or over the
    /// channel axis at each position (`LayerNorm`); both share the cache.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Reshape(Var),
    TransposeLast2(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
enum NormKind {
    Group(usize),
    Channel,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and [`Graph::backward`] visits each node once.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients of a scalar w.r.t. the leaves that require them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that tracks gradients for leaves created with [`Graph::param`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph where nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Elementwise square root; errors on negative input.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(TensorError::NonFinite("sqrt of negative input"));
        }
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v / (1.0 + (-v).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        self.matmul_t(a, b, false, false)
    }

    /// Product `op(a) * op(b)` over rank-2 or batched rank-3 operands, where
    /// `op` transposes the last two axes when the corresponding flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = sa.len();
        if rank != sb.len() || !(rank == 2 || rank == 3) {
            return shape_err("matmul", &sa, &sb);
        }
        let batch = if rank == 3 { sa[0] } else { 1 };
        if rank == 3 && sb[0] != batch {
            return shape_err("matmul", &sa, &sb);
        }
        let (ra, ca) = (sa[rank - 2], sa[rank - 1]);
        let (rb, cb) = (sb[rank - 2], sb[rank - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return shape_err("matmul", &sa, &sb);
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    ta,
                    &db[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if rank == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Matmul { a, b, ta, tb, batch, m, k, n }, rg))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.all_finite() {
            return Err(TensorError::NonFinite("softmax_lastdim"));
        }
        let l = *x.shape().last().expect("rank >= 1");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(l) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err("conv2d", &sx, &sw);
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(TensorError::Contract(format!(
                "conv2d kernel {:?} with stride {stride} pad {pad} does not fit input {:?}",
                sw, sx
            )));
        }
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            ow: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let out = conv2d_forward(self.value(x).data(), sx[0], self.value(w).data(), sw[0], &geom);
        let t = Tensor::new(&[sx[0], sw[0], geom.oh, geom.ow], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                geom,
                batch: sx[0],
                out_c: sw[0],
            },
            rg,
        ))
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine `[C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || !sx[1].is_multiple_of(groups) {
            return Err(TensorError::Contract(format!("group_norm with {groups} groups on {sx:?}")));
        }
        self.check_affine("group_norm", sx[1], gamma, beta)?;
        self.norm(x, gamma, beta, NormKind::Group(groups))
    }

    /// Layer normalization over the channel axis of `[B, C, ...]`, applied
    /// independently at each position, with per-channel affine `[C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return shape_err("layer_norm", &sx, &[0, 0]);
        }
        self.check_affine("layer_norm", sx[1], gamma, beta)?;
        self.norm(x, gamma, beta, NormKind::Channel)
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return shape_err(op, &[c], self.shape(p));
            }
        }
        Ok(())
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, kind: NormKind) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        let (mean, rstd);
        match kind {
            NormKind::Group(groups) => {
                let cg = c / groups;
                let n = cg * s;
                let mut mv = Vec::with_capacity(b * groups);
                let mut rv = Vec::with_capacity(b * groups);
                for blk in 0..b * groups {
                    let seg = &xd[blk * n..(blk + 1) * n];
                    let mu = seg.iter().sum::<f64>() / n as f64;
                    let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let r = 1.0 / (var + NORM_EPS).sqrt();
                    let g0 = (blk % groups) * cg;
                    for (ci, chunk) in seg.chunks(s).enumerate() {
                        let (ga, be) = (g[g0 + ci], bt[g0 + ci]);
                        let o = &mut out[blk * n + ci * s..blk * n + (ci + 1) * s];
                        for (ov, &xv) in o.iter_mut().zip(chunk) {
                            *ov = (xv - mu) * r * ga + be;
                        }
                    }
                    mv.push(mu);
                    rv.push(r);
                }
                mean = mv;
                rstd = rv;
            }
            NormKind::Channel => {
                let mut mv = vec![0.0; b * s];
                let mut rv = vec![0.0; b * s];
                for bi in 0..b {
                    let base = bi * c * s;
                    let m = &mut mv[bi * s..(bi + 1) * s];
                    for ci in 0..c {
                        for (mj, &v) in m.iter_mut().zip(&xd[base + ci * s..base + (ci + 1) * s]) {
                            *mj += v;
                        }
                    }
                    m.iter_mut().for_each(|v| *v /= c as f64);
                    let r = &mut rv[bi * s..(bi + 1) * s];
                    for ci in 0..c {
                        let row = &xd[base + ci * s..base + (ci + 1) * s];
                        for j in 0..s {
                            let d = row[j] - m[j];
                            r[j] += d * d;
                        }
                    }
                    r.iter_mut().for_each(|v| *v = 1.0 / (*v / c as f64 + NORM_EPS).sqrt());
                    for ci in 0..c {
                        let row = &xd[base + ci * s..base + (ci + 1) * s];
                        let o = &mut out[base + ci * s..base + (ci + 1) * s];
                        for j in 0..s {
                            o[j] = (row[j] - m[j]) * r[j] * g[ci] + bt[ci];
                        }
                    }
                }
                mean = mv;
                rstd = rv;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias to `x: [B, C, ...]`. `b` is `[C]` (shared
    /// across the batch) or `[B, C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let ok = sx.len() >= 2 && ((sb.len() == 1 && sb[0] == sx[1]) || (sb.len() == 2 && sb == sx[..2]));
        if !ok {
            return shape_err("add_bias", &sx, &sb);
        }
        let (bn, c) = (sx[0], sx[1]);
        let s: usize = sx[2..].iter().product();
        let per_batch = sb.len() == 2;
        let mut out = self.value(x).clone();
        {
            let bd = self.value(b).data();
            let od = out.data_mut();
            for bi in 0..bn {
                for ci in 0..c {
                    let bv = if per_batch { bd[bi * c + ci] } else { bd[ci] };
                    let base = (bi * c + ci) * s;
                    od[base..base + s].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    /// Channel concatenation of `[B, C_i, H, W]` inputs.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return shape_err("upsample_nearest2x", &sx, &[0, 0, 0, 0]);
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                let src = &xd[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let dst = &mut out[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let t = Tensor::new(&[sx[0], sx[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || !sx[2].is_multiple_of(2) || !sx[3].is_multiple_of(2) {
            return Err(TensorError::Contract(format!("avg_pool2x needs even spatial extents, got {sx:?}")));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; bc * oh * ow];
        for p in 0..bc {
            for y in 0..oh {
                for xo in 0..ow {
                    let i = (p * h + 2 * y) * w + 2 * xo;
                    out[(p * oh + y) * ow + xo] = 0.25 * (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]);
                }
            }
        }
        let t = Tensor::new(&[sx[0], sx[1], oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AvgPool2x(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return shape_err("transpose_last2", &sx, &[0, 0]);
        }
        let r = sx.len();
        let (m, n) = (sx[r - 2], sx[r - 1]);
        let out = transpose_blocks(self.value(x).data(), m, n);
        let mut shape = sx.clone();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::TransposeLast2(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Reverse-mode pass from a single-element output.
    ///
    /// Returns gradients for every leaf that requires one.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads });
        }
        grads[out.0] = Some(Tensor::ones(self.shape(out)));
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(dy);
                continue;
            }
            self.backward_node(node, dy, &mut grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, dy: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, dy.clone());
                self.accumulate(grads, *a, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, dy.scale(-1.0));
                self.accumulate(grads, *a, dy);
            }
            Op::Mul(a, b) => {
                let ga = dy.zip_map(self.value(*b), |g, v| g * v)?;
                let gb = dy.zip_map(self.value(*a), |g, v| g * v)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, dy),
            Op::Exp(a) => {
                let g = dy.zip_map(y, |g, e| g * e)?;
                self.accumulate(grads, *a, g);
            }
            Op::Sqrt(a) => {
                let g = dy.zip_map(y, |g, r| g * 0.5 / r)?;
                self.accumulate(grads, *a, g);
            }
            Op::Silu(a) => {
                let g = dy.zip_map(self.value(*a), |g, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * (s + x * s * (1.0 - s))
                })?;
                self.accumulate(grads, *a, g);
            }
            &Op::Matmul { a, b, ta, tb, batch, m, k, n } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let dyd = dy.data();
                if self.requires_grad(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let (dc, bb) = (&dyd[i * m * n..(i + 1) * m * n], &db[i * k * n..(i + 1) * k * n]);
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, n, m, bb, tb, dc, true, out, 0.0);
                        } else {
                            gemm(m, n, k, dc, false, bb, !tb, out, 0.0);
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(self.shape(a), ga)?);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (dc, aa) = (&dyd[i * m * n..(i + 1) * m * n], &da[i * m * k..(i + 1) * m * k]);
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, dc, true, aa, ta, out, 0.0);
                        } else {
                            gemm(k, m, n, aa, !ta, dc, false, out, 0.0);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(self.shape(b), gb)?);
                }
            }
            Op::Softmax(a) => {
                let l = *y.shape().last().expect("rank >= 1");
                let mut g = dy;
                for (gr, yr) in g.data_mut().chunks_mut(l).zip(y.data().chunks(l)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            &Op::Conv2d { x, w, geom, batch, out_c } => {
                let (dx, dw) = conv2d_backward(
                    self.value(x).data(),
                    batch,
                    self.value(w).data(),
                    out_c,
                    &geom,
                    dy.data(),
                    self.requires_grad(x),
                    self.requires_grad(w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(self.shape(x), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::new(self.shape(w), dw)?);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                mean,
                rstd,
            } => {
                let (dx, dg, db) = self.norm_backward(*x, *gamma, *kind, mean, rstd, &dy);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::AddBias { x, b } => {
                let sx = self.shape(*x);
                let (bn, c) = (sx[0], sx[1]);
                let s: usize = sx[2..].iter().product();
                if self.requires_grad(*b) {
                    let per_batch = self.shape(*b).len() == 2;
                    let mut gb = vec![0.0; self.value(*b).numel()];
                    for bi in 0..bn {
                        for ci in 0..c {
                            let base = (bi * c + ci) * s;
                            let v: f64 = dy.data()[base..base + s].iter().sum();
                            gb[if per_batch { bi * c + ci } else { ci }] += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
                }
                self.accumulate(grads, *x, dy);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, dy.slice_channels(start, c)?);
                    }
                    start += c;
                }
            }
            &Op::SliceChannels { x, start } => {
                if self.requires_grad(x) {
                    let sx = self.shape(x);
                    let (bn, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let len = dy.dim(1);
                    let mut g = vec![0.0; bn * c * hw];
                    for bi in 0..bn {
                        let dst = (bi * c + start) * hw;
                        g[dst..dst + len * hw].copy_from_slice(&dy.data()[bi * len * hw..(bi + 1) * len * hw]);
                    }
                    self.accumulate(grads, x, Tensor::new(sx, g)?);
                }
            }
            Op::Upsample2x(x) => {
                let sx = self.shape(*x);
                let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let mut g = vec![0.0; bc * h * w];
                let d = dy.data();
                for p in 0..bc {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            g[(p * h + yy / 2) * w + xx / 2] += d[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, g)?);
            }
            Op::AvgPool2x(x) => {
                let sx = self.shape(*x);
                let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut g = vec![0.0; bc * h * w];
                let d = dy.data();
                for p in 0..bc {
                    for yy in 0..h {
                        for xx in 0..w {
                            g[(p * h + yy) * w + xx] = 0.25 * d[(p * oh + yy / 2) * ow + xx / 2];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, g)?);
            }
            Op::Reshape(x) => {
                let g = dy.into_reshaped(self.shape(*x))?;
                self.accumulate(grads, *x, g);
            }
            Op::TransposeLast2(x) => {
                let r = y.rank();
                let (m, n) = (y.dim(r - 2), y.dim(r - 1));
                let g = transpose_blocks(dy.data(), m, n);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), g)?);
            }
            Op::Sum(x) => {
                let g = dy.item()?;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let g = dy.item()? / self.value(*x).numel() as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
        }
        Ok(())
    }

    fn norm_backward(&self, x: Var, gamma: Var, kind: NormKind, mean: &[f64], rstd: &[f64], dy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let xv = self.value(x);
        let shape = xv.shape();
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let xd = xv.data();
        let dyd = dy.data();
        let g = self.value(gamma).data();
        let mut dx = vec![0.0; xd.len()];
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        match kind {
            NormKind::Group(groups) => {
                let cg = c / groups;
                let n = cg * s;
                for blk in 0..b * groups {
                    let (mu, r) = (mean[blk], rstd[blk]);
                    let g0 = (blk % groups) * cg;
                    let base = blk * n;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for ci in 0..cg {
                        let ch = g0 + ci;
                        for j in 0..s {
                            let idx = base + ci * s + j;
                            let xh = (xd[idx] - mu) * r;
                            let dxh = dyd[idx] * g[ch];
                            s1 += dxh;
                            s2 += dxh * xh;
                            dg[ch] += dyd[idx] * xh;
                            db[ch] += dyd[idx];
                        }
                    }
                    let (m1, m2) = (s1 / n as f64, s2 / n as f64);
                    for ci in 0..cg {
                        let ch = g0 + ci;
                        for j in 0..s {
                            let idx = base + ci * s + j;
                            let xh = (xd[idx] - mu) * r;
                            dx[idx] = r * (dyd[idx] * g[ch] - m1 - xh * m2);
                        }
                    }
                }
            }
            NormKind::Channel => {
                let mut s1 = vec![0.0; s];
                let mut s2 = vec![0.0; s];
                for bi in 0..b {
                    let base = bi * c * s;
                    let (mu, r) = (&mean[bi * s..(bi + 1) * s], &rstd[bi * s..(bi + 1) * s]);
                    s1.fill(0.0);
                    s2.fill(0.0);
                    for ci in 0..c {
                        for j in 0..s {
                            let idx = base + ci * s + j;
                            let xh = (xd[idx] - mu[j]) * r[j];
                            let dxh = dyd[idx] * g[ci];
                            s1[j] += dxh;
                            s2[j] += dxh * xh;
                            dg[ci] += dyd[idx] * xh;
                            db[ci] += dyd[idx];
                        }
                    }
                    for (ci, &gc) in g.iter().enumerate() {
                        for j in 0..s {
                            let idx = base + ci * s + j;
                            let xh = (xd[idx] - mu[j]) * r[j];
                            dx[idx] = r[j] * (dyd[idx] * gc - s1[j] / c as f64 - xh * s2[j] / c as f64);
                        }
                    }
                }
            }
        }
        (
            Tensor::new(shape, dx).expect("shape preserved"),
            Tensor::new(&[c], dg).expect("affine shape"),
            Tensor::new(&[c], db).expect("affine shape"),
        )
    }
}

fn transpose_blocks(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

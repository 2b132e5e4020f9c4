use super::kernels::{bilinear_taps, gemm, ConvGeom};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The elementwise family exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
    Neg,
    Scale(f64),
}

#[derive(Clone, Copy, Debug)]
enum Pool {
    Avg,
    Max,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    /// `m·x` when `keep`, otherwise `(1 − m)·x`.
    Masked {
        x: Var,
        m: Var,
        keep: bool,
    },
    Sigmoid(Var),
    Exp(Var),
    Relu(Var),
    Abs(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SpatialPool {
        x: Var,
        argmax: Option<Vec<usize>>,
    },
    ChannelPool {
        x: Var,
        argmax: Option<Vec<usize>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
    },
    GaussianAffinity {
        q: Var,
        k: Var,
        sigma: Var,
        dist: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them
/// in reverse exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every tape value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when `var` does not influence the loss or was not tracked.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// The gradient as a tensor; zeros when `var` is unreachable.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient buffer out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// For each element of `a_shape`, the flat index of the broadcast operand.
/// `None` means the shapes are equal and the map is the identity.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if a_shape == b_shape {
        return Ok(None);
    }
    let legal = a_shape.len() == b_shape.len()
        && a_shape.iter().zip(b_shape).all(|(&a, &b)| a == b || b == 1);
    if !legal {
        return Err(Error::dim(format!(
            "cannot broadcast {b_shape:?} onto {a_shape:?}"
        )));
    }
    let b_strides = strides(b_shape);
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    for _ in 0..n {
        let off = idx
            .iter()
            .zip(b_shape)
            .zip(&b_strides)
            .map(|((&i, &e), &s)| if e == 1 { 0 } else { i * s })
            .sum();
        map.push(off);
        for ax in (0..a_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < a_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Some(map))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[B, C, P]` planes to a `C × (B·P)` matrix.
fn to_channel_major(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            out[ch * b * p + n * p..ch * b * p + (n + 1) * p]
                .copy_from_slice(&x[(n * c + ch) * p..(n * c + ch + 1) * p]);
        }
    }
    out
}

fn from_channel_major(m: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for n in 0..b {
        for ch in 0..c {
            out[(n * c + ch) * p..(n * c + ch + 1) * p]
                .copy_from_slice(&m[ch * b * p + n * p..ch * b * p + (n + 1) * p]);
        }
    }
    out
}

fn dims4(op: &str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::dim(format!(
            "{op} expects a 4-D tensor, got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A tracked input: gradients will be computed for it.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::usage(format!("{op:?} requires a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b(b)?),
            ElementwiseOp::Sub => self.sub(a, need_b(b)?),
            ElementwiseOp::Mul => self.mul(a, need_b(b)?),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Exp => Ok(self.exp(a)),
            ElementwiseOp::Neg => Ok(self.scale(a, -1.0)),
            ElementwiseOp::Scale(s) => Ok(self.scale(a, s)),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let map = broadcast_map(av.shape(), bv.shape())?;
        let data = match &map {
            None => av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Some(m) => av
                .data()
                .iter()
                .zip(m)
                .map(|(&x, &j)| f(x, bv.data()[j]))
                .collect(),
        };
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    /// `a + b`; `b` may broadcast along extent-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product; `b` may broadcast along extent-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// Splits `x` into `(m·x, (1 − m)·x)` with `m` broadcast over `x`.
    ///
    /// For each element the larger share is computed as a product and the
    /// other as the remainder `x − share`, so the two outputs add back to
    /// `x` exactly in floating point whenever `m` lies in `[0, 1]`.
    pub fn complementary_mask(&mut self, x: Var, m: Var) -> Result<(Var, Var)> {
        let xv = &self.nodes[x.0].value;
        let mv = &self.nodes[m.0].value;
        let map = broadcast_map(xv.shape(), mv.shape())?;
        let n = xv.numel();
        let (mut kept, mut rest) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let xi = xv.data()[i];
            let mi = mv.data()[map.as_ref().map_or(i, |mp| mp[i])];
            if mi >= 0.5 {
                let k = mi * xi;
                kept.push(k);
                rest.push(xi - k);
            } else {
                let r = (1.0 - mi) * xi;
                kept.push(xi - r);
                rest.push(r);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, m]);
        let a = self.push(
            Tensor {
                shape: shape.clone(),
                data: kept,
            },
            Op::Masked { x, m, keep: true },
            rg,
        );
        let b = self.push(
            Tensor { shape, data: rest },
            Op::Masked { x, m, keep: false },
            rg,
        );
        Ok((a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// 2-D matrix product `op(a)·op(b)`, where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects 2-D operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        self.matmul_impl(a, b, 1, m, k, n, ta, tb, vec![m, n])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matrix product over a shared leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "bmm expects [B,m,k] x [B,k,n], got {sa:?} and {sb:?}"
            )));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "bmm inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        self.matmul_impl(a, b, batch, m, k, n, ta, tb, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        };
        Ok(self.push(Tensor { shape, data: out }, op, rg))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = Self::axis_split(xv.shape(), axis);
        let mut out = vec![0.0; xv.numel()];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// The sub-range `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = Self::axis_split(&s, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * ext * inner + start * inner;
            data.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape, data }, Op::Narrow { x, axis, start }, rg))
    }

    /// Splits the channel axis of `[b, c, h, w]` into `n` equal contiguous groups.
    pub fn group_split(&mut self, x: Var, n: usize) -> Result<Vec<Var>> {
        let [_, c, _, _] = dims4("group_split", self.shape(x))?;
        if n == 0 || c % n != 0 {
            return Err(Error::config(format!(
                "{c} channels cannot be split into {n} groups"
            )));
        }
        if n == 1 {
            return Ok(vec![x]);
        }
        let width = c / n;
        (0..n)
            .map(|g| self.narrow(x, 1, g * width, width))
            .collect()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    fn spatial_pool(&mut self, x: Var, mode: Pool) -> Result<Var> {
        let [b, c, h, w] = dims4("global pool", self.shape(x))?;
        let p = h * w;
        let d = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for (plane, (o, am)) in out.iter_mut().zip(argmax.iter_mut()).enumerate() {
            let vals = &d[plane * p..(plane + 1) * p];
            match mode {
                Pool::Avg => *o = vals.iter().sum::<f64>() / p as f64,
                Pool::Max => {
                    let mut best = 0;
                    for (i, &v) in vals.iter().enumerate() {
                        if v > vals[best] {
                            best = i;
                        }
                    }
                    *am = best;
                    *o = vals[best];
                }
            }
        }
        let argmax = matches!(mode, Pool::Max).then_some(argmax);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, c, 1, 1],
                data: out,
            },
            Op::SpatialPool { x, argmax },
            rg,
        ))
    }

    /// Per-channel mean over all spatial positions: `[b,c,h,w] → [b,c,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.spatial_pool(x, Pool::Avg)
    }

    /// Per-channel maximum; the gradient goes to the first maximal position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        self.spatial_pool(x, Pool::Max)
    }

    fn channel_pool(&mut self, x: Var, mode: Pool) -> Result<Var> {
        let [b, c, h, w] = dims4("channel pool", self.shape(x))?;
        let p = h * w;
        let d = self.value(x).data();
        let mut out = vec![0.0; b * p];
        let mut argmax = vec![0usize; b * p];
        for n in 0..b {
            for i in 0..p {
                let at = |ch: usize| (n * c + ch) * p + i;
                match mode {
                    Pool::Avg => {
                        out[n * p + i] = (0..c).map(|ch| d[at(ch)]).sum::<f64>() / c as f64;
                    }
                    Pool::Max => {
                        let mut best = 0;
                        for ch in 1..c {
                            if d[at(ch)] > d[at(best)] {
                                best = ch;
                            }
                        }
                        argmax[n * p + i] = best;
                        out[n * p + i] = d[at(best)];
                    }
                }
            }
        }
        let argmax = matches!(mode, Pool::Max).then_some(argmax);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, 1, h, w],
                data: out,
            },
            Op::ChannelPool { x, argmax },
            rg,
        ))
    }

    /// Mean across channels at every pixel: `[b,c,h,w] → [b,1,h,w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.channel_pool(x, Pool::Avg)
    }

    /// Max across channels; ties resolve to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        self.channel_pool(x, Pool::Max)
    }

    /// Cross-correlation of `x: [b, c_in, h, w]` with `w: [c_out, c_in, kh, kw]`
    /// plus a per-output-channel `bias: [c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, c_in, h, wd] = dims4("conv2d input", self.shape(x))?;
        let [c_out, wc_in, kh, kw] = dims4("conv2d weight", self.shape(w))?;
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                self.shape(bias)
            )));
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, kw, stride, padding).ok_or_else(|| {
            Error::dim(format!(
                "conv2d: kernel {kh}x{kw}, stride {stride}, padding {padding} do not fit {h}x{wd}"
            ))
        })?;
        let p = geom.out_positions();
        let total = b * p;
        let krows = geom.col_rows();
        let mut cols = vec![0.0; krows * total];
        let xd = self.value(x).data();
        for n in 0..b {
            geom.im2col(
                &xd[n * c_in * h * wd..(n + 1) * c_in * h * wd],
                &mut cols,
                total,
                n,
            );
        }
        let mut out_m = vec![0.0; c_out * total];
        gemm(
            c_out,
            krows,
            total,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out_m,
            false,
        );
        let mut out = from_channel_major(&out_m, b, c_out, p);
        let bd = self.value(bias).data();
        for n in 0..b {
            for co in 0..c_out {
                out[(n * c_out + co) * p..(n * c_out + co + 1) * p]
                    .iter_mut()
                    .for_each(|v| *v += bd[co]);
            }
        }
        let rg = self.any_grad(&[x, w, bias]);
        let value = Tensor {
            shape: vec![b, c_out, geom.oh, geom.ow],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`] with respect
    /// to its input) with `w: [c_in, c_out, kh, kw]`; output extent is
    /// `(in − 1)·stride − 2·padding + kernel`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, c_in, h, wd] = dims4("conv_transpose2d input", self.shape(x))?;
        let [wc_in, c_out, kh, kw] = dims4("conv_transpose2d weight", self.shape(w))?;
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv_transpose2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::dim(format!(
                "conv_transpose2d bias must be [{c_out}]"
            )));
        }
        let oh = ((h - 1) * stride + kh).checked_sub(2 * padding);
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * padding);
        let geom = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                ConvGeom::new(c_out, oh, ow, kh, kw, stride, padding)
            }
            _ => None,
        }
        .filter(|g| g.oh == h && g.ow == wd)
        .ok_or_else(|| Error::dim("conv_transpose2d: empty or inconsistent output extent"))?;
        let p_in = h * wd;
        let total = b * p_in;
        let krows = geom.col_rows();
        let xm = to_channel_major(self.value(x).data(), b, c_in, p_in);
        let mut cols = vec![0.0; krows * total];
        gemm(
            krows,
            c_in,
            total,
            self.value(w).data(),
            true,
            &xm,
            false,
            &mut cols,
            false,
        );
        let plane = c_out * geom.h * geom.w;
        let mut out = vec![0.0; b * plane];
        for n in 0..b {
            geom.col2im(&cols, total, n, &mut out[n * plane..(n + 1) * plane]);
        }
        let bd = self.value(bias).data();
        let p_out = geom.h * geom.w;
        for n in 0..b {
            for co in 0..c_out {
                out[(n * c_out + co) * p_out..(n * c_out + co + 1) * p_out]
                    .iter_mut()
                    .for_each(|v| *v += bd[co]);
            }
        }
        let rg = self.any_grad(&[x, w, bias]);
        let value = Tensor {
            shape: vec![b, c_out, geom.h, geom.w],
            data: out,
        };
        Ok(self.push(value, Op::ConvTranspose2d { x, w, bias, geom }, rg))
    }

    /// Bilinear resampling with half-pixel centres to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, h, w] = dims4("resize_bilinear", self.shape(x))?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::dim("resize_bilinear to or from an empty extent"));
        }
        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let value = self.value(x).resize_bilinear(out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Resize { x, rows, cols }, rg))
    }

    /// Pairwise Gaussian similarity between the spatial positions of `q`
    /// and `k` (both `[b, c, ·, ·]`):
    /// `A[n, i, j] = exp(−‖q_i − k_j‖² / (2σ²))`, shape `[b, Nq, Nk]`.
    ///
    /// Squared distances use `‖q‖² + ‖k‖² − 2q·k`, clamped at zero.
    /// `sigma` is a one-element tensor so it can optionally be learned.
    pub fn gaussian_affinity(&mut self, q: Var, k: Var, sigma: Var) -> Result<Var> {
        let [b, c, hq, wq] = dims4("gaussian_affinity query", self.shape(q))?;
        let [bk, ck, hk, wk] = dims4("gaussian_affinity key", self.shape(k))?;
        if b != bk || c != ck {
            return Err(Error::dim(format!(
                "gaussian_affinity: query {:?} and key {:?} must share batch and channels",
                self.shape(q),
                self.shape(k)
            )));
        }
        let s = self.value(sigma).item()?;
        if !(s > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {s}")));
        }
        let (nq, nk) = (hq * wq, hk * wk);
        let inv = 1.0 / (2.0 * s * s);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut dist = vec![0.0; b * nq * nk];
        let mut out = vec![0.0; b * nq * nk];
        for n in 0..b {
            let qm = &qd[n * c * nq..(n + 1) * c * nq];
            let km = &kd[n * c * nk..(n + 1) * c * nk];
            let d = &mut dist[n * nq * nk..(n + 1) * nq * nk];
            gemm(nq, c, nk, qm, true, km, false, d, false);
            let qn: Vec<f64> = (0..nq)
                .map(|i| (0..c).map(|ch| qm[ch * nq + i].powi(2)).sum())
                .collect();
            let kn: Vec<f64> = (0..nk)
                .map(|j| (0..c).map(|ch| km[ch * nk + j].powi(2)).sum())
                .collect();
            for i in 0..nq {
                for j in 0..nk {
                    let v = &mut d[i * nk + j];
                    *v = (qn[i] + kn[j] - 2.0 * *v).max(0.0);
                }
            }
            for (o, dv) in out[n * nq * nk..(n + 1) * nq * nk].iter_mut().zip(d.iter()) {
                *o = (-dv * inv).exp();
            }
        }
        let rg = self.any_grad(&[q, k, sigma]);
        let value = Tensor {
            shape: vec![b, nq, nk],
            data: out,
        };
        Ok(self.push(value, Op::GaussianAffinity { q, k, sigma, dist }, rg))
    }

    /// Reverse pass from a one-element `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::usage("backward already ran on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                if tracked(b) {
                    let map =
                        broadcast_map(val(a).shape(), val(b).shape()).expect("checked in forward");
                    acc(b, &mut |gb| match &map {
                        None => gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y),
                        Some(m) => m.iter().zip(g).for_each(|(&j, y)| gb[j] += sign * y),
                    });
                }
            }
            &Op::Mul(a, b) => {
                let map =
                    broadcast_map(val(a).shape(), val(b).shape()).expect("checked in forward");
                let (ad, bd) = (val(a).data(), val(b).data());
                acc(a, &mut |ga| match &map {
                    None => ga
                        .iter_mut()
                        .zip(g)
                        .zip(bd)
                        .for_each(|((x, y), z)| *x += y * z),
                    Some(m) => ga
                        .iter_mut()
                        .zip(g)
                        .zip(m)
                        .for_each(|((x, y), &j)| *x += y * bd[j]),
                });
                acc(b, &mut |gb| match &map {
                    None => gb
                        .iter_mut()
                        .zip(g)
                        .zip(ad)
                        .for_each(|((x, y), z)| *x += y * z),
                    Some(m) => m
                        .iter()
                        .zip(g)
                        .zip(ad)
                        .for_each(|((&j, y), z)| gb[j] += y * z),
                });
            }
            &Op::Masked { x, m, keep } => {
                let map =
                    broadcast_map(val(x).shape(), val(m).shape()).expect("checked in forward");
                let (xd, md) = (val(x).data(), val(m).data());
                let j = |i: usize| map.as_ref().map_or(i, |mp| mp[i]);
                let (sign, base) = if keep { (1.0, 0.0) } else { (-1.0, 1.0) };
                acc(x, &mut |gx| {
                    for (i, (dst, gy)) in gx.iter_mut().zip(g).enumerate() {
                        *dst += gy * (base + sign * md[j(i)]);
                    }
                });
                acc(m, &mut |gm| {
                    for (i, (gy, xi)) in g.iter().zip(xd).enumerate() {
                        gm[j(i)] += sign * gy * xi;
                    }
                });
            }
            &Op::Affine(a, s) => acc(a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
            }),
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv * (1.0 - yv);
                    }
                });
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((x, gy), yv)| *x += gy * yv)
                });
            }
            &Op::Relu(a) => {
                let xd = val(a).data();
                acc(a, &mut |ga| {
                    for ((x, gy), xv) in ga.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            &Op::Abs(a) => {
                let xd = val(a).data();
                acc(a, &mut |ga| {
                    for ((x, gy), xv) in ga.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *x += gy;
                        } else if *xv < 0.0 {
                            *x -= gy;
                        }
                    }
                });
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (ad, bd) = (val(a).data(), val(b).data());
                acc(a, &mut |ga| {
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, n, m, bi, tb, gc, true, gai, true);
                        } else {
                            gemm(m, n, k, gc, false, bi, !tb, gai, true);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gc, true, ai, ta, gbi, true);
                        } else {
                            gemm(k, m, n, ai, !ta, gc, false, gbi, true);
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = Self::axis_split(node.value.shape(), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = val(v).shape()[*axis] * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, ext, inner) = Self::axis_split(val(x).shape(), axis);
                let len = node.value.shape()[axis];
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let to = o * ext * inner + start * inner;
                        gx[to..to + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            &Op::SumAll(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            &Op::MeanAll(x) => {
                let s = g[0] / val(x).numel() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::SpatialPool { x, argmax } => {
                let shape = val(*x).shape();
                let p = shape[2] * shape[3];
                acc(*x, &mut |gx| {
                    for (plane, gv) in g.iter().enumerate() {
                        match argmax {
                            None => gx[plane * p..(plane + 1) * p]
                                .iter_mut()
                                .for_each(|a| *a += gv / p as f64),
                            Some(am) => gx[plane * p + am[plane]] += gv,
                        }
                    }
                });
            }
            Op::ChannelPool { x, argmax } => {
                let [b, c, h, w] = dims4("", val(*x).shape()).expect("4-D");
                let p = h * w;
                acc(*x, &mut |gx| {
                    for n in 0..b {
                        for i in 0..p {
                            let gv = g[n * p + i];
                            match argmax {
                                None => {
                                    (0..c).for_each(|ch| gx[(n * c + ch) * p + i] += gv / c as f64)
                                }
                                Some(am) => gx[(n * c + am[n * p + i]) * p + i] += gv,
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let b = val(*x).shape()[0];
                let c_out = val(*w).shape()[0];
                let p = geom.out_positions();
                let total = b * p;
                let krows = geom.col_rows();
                let gm = to_channel_major(g, b, c_out, p);
                acc(*w, &mut |gw| {
                    gemm(c_out, total, krows, &gm, false, cols, true, gw, true)
                });
                acc(*bias, &mut |gb| {
                    for (co, v) in gb.iter_mut().enumerate() {
                        *v += gm[co * total..(co + 1) * total].iter().sum::<f64>();
                    }
                });
                if tracked(*x) {
                    let mut gcols = vec![0.0; krows * total];
                    gemm(
                        krows,
                        c_out,
                        total,
                        val(*w).data(),
                        true,
                        &gm,
                        false,
                        &mut gcols,
                        false,
                    );
                    let plane = geom.c_in * geom.h * geom.w;
                    acc(*x, &mut |gx| {
                        for n in 0..b {
                            geom.col2im(&gcols, total, n, &mut gx[n * plane..(n + 1) * plane]);
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, bias, geom } => {
                let [b, c_in, h, wd] = dims4("", val(*x).shape()).expect("4-D");
                let p_in = h * wd;
                let total = b * p_in;
                let krows = geom.col_rows();
                let plane = geom.c_in * geom.h * geom.w;
                let mut gcols = vec![0.0; krows * total];
                for n in 0..b {
                    geom.im2col(&g[n * plane..(n + 1) * plane], &mut gcols, total, n);
                }
                acc(*bias, &mut |gb| {
                    let p_out = geom.h * geom.w;
                    for n in 0..b {
                        for (co, v) in gb.iter_mut().enumerate() {
                            *v += g[(n * geom.c_in + co) * p_out..(n * geom.c_in + co + 1) * p_out]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
                if tracked(*w) {
                    let xm = to_channel_major(val(*x).data(), b, c_in, p_in);
                    acc(*w, &mut |gw| {
                        gemm(c_in, total, krows, &xm, false, &gcols, true, gw, true)
                    });
                }
                if tracked(*x) {
                    let mut gxm = vec![0.0; c_in * total];
                    gemm(
                        c_in,
                        krows,
                        total,
                        val(*w).data(),
                        false,
                        &gcols,
                        false,
                        &mut gxm,
                        false,
                    );
                    let gx_new = from_channel_major(&gxm, b, c_in, p_in);
                    acc(*x, &mut |gx| {
                        gx.iter_mut().zip(&gx_new).for_each(|(a, b)| *a += b)
                    });
                }
            }
            Op::Resize { x, rows, cols } => {
                let [b, c, h, w] = dims4("", val(*x).shape()).expect("4-D");
                let (oh, ow) = (rows.len(), cols.len());
                acc(*x, &mut |gx| {
                    for plane in 0..b * c {
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                dst[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * gv;
                                dst[y0 * w + x1] += (1.0 - ty) * tx * gv;
                                dst[y1 * w + x0] += ty * (1.0 - tx) * gv;
                                dst[y1 * w + x1] += ty * tx * gv;
                            }
                        }
                    }
                });
            }
            Op::GaussianAffinity { q, k, sigma, dist } => {
                let [b, c, hq, wq] = dims4("", val(*q).shape()).expect("4-D");
                let nq = hq * wq;
                let nk = node.value.shape()[2];
                let s = val(*sigma).data()[0];
                let inv = 1.0 / (2.0 * s * s);
                let a = node.value.data();
                // dL/dD = g · dA/dD = −g·A/(2σ²)
                let h: Vec<f64> = g.iter().zip(a).map(|(gv, av)| -gv * av * inv).collect();
                let (qd, kd) = (val(*q).data(), val(*k).data());
                acc(*q, &mut |gq| {
                    for n in 0..b {
                        let hn = &h[n * nq * nk..(n + 1) * nq * nk];
                        let qm = &qd[n * c * nq..(n + 1) * c * nq];
                        let km = &kd[n * c * nk..(n + 1) * c * nk];
                        let gqn = &mut gq[n * c * nq..(n + 1) * c * nq];
                        let mut cross = vec![0.0; c * nq];
                        gemm(c, nk, nq, km, false, hn, true, &mut cross, false);
                        for i in 0..nq {
                            let r: f64 = hn[i * nk..(i + 1) * nk].iter().sum();
                            for ch in 0..c {
                                gqn[ch * nq + i] +=
                                    2.0 * qm[ch * nq + i] * r - 2.0 * cross[ch * nq + i];
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for n in 0..b {
                        let hn = &h[n * nq * nk..(n + 1) * nq * nk];
                        let qm = &qd[n * c * nq..(n + 1) * c * nq];
                        let km = &kd[n * c * nk..(n + 1) * c * nk];
                        let gkn = &mut gk[n * c * nk..(n + 1) * c * nk];
                        let mut cross = vec![0.0; c * nk];
                        gemm(c, nq, nk, qm, false, hn, false, &mut cross, false);
                        for j in 0..nk {
                            let col: f64 = (0..nq).map(|i| hn[i * nk + j]).sum();
                            for ch in 0..c {
                                gkn[ch * nk + j] +=
                                    2.0 * km[ch * nk + j] * col - 2.0 * cross[ch * nk + j];
                            }
                        }
                    }
                });
                acc(*sigma, &mut |gs| {
                    let s3 = s * s * s;
                    gs[0] += g
                        .iter()
                        .zip(a)
                        .zip(dist)
                        .map(|((gv, av), dv)| gv * av * dv / s3)
                        .sum::<f64>();
                });
            }
        }
    }
}

use super::{gemm, Real, Tensor};
use crate::error::{FrnError, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside this module. The caller
/// computes the forward value; the graph calls back for the vector-Jacobian
/// product during [`Graph::backward`].
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input; entries whose `needs` flag is
    /// false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        offsets: Vec<(usize, usize)>,
    },
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    DwConv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ChannelMean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of executed operations. Node inputs always precede the
/// node, so reverse insertion order is a valid reverse topological order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// When enabled every op fails with [`FrnError::NonFinite`] if it
    /// produces NaN or Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(FrnError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(FrnError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.numel();
        if n == 0 {
            return Err(FrnError::contract("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / T::of(n as f64)), Op::Mean(a), &[a])
    }

    /// Batched matrix product `[..,M,K] × [..,K,N] → [..,M,N]` with
    /// broadcasting over the leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || FrnError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(err)?;
        let idx_a = broadcast_index_map(batch_a, &batch);
        let idx_b = broadcast_index_map(batch_b, &batch);
        let offsets: Vec<(usize, usize)> = idx_a
            .iter()
            .zip(&idx_b)
            .map(|(&ia, &ib)| (ia * m * k, ib * k * n))
            .collect();
        let mut out = vec![T::zero(); offsets.len() * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &va[oa..oa + m * k],
                    false,
                    &vb[ob..ob + k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n, offsets }, &[a, b])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(FrnError::contract(format!(
                "transpose expects rank 2, got {:?}",
                v.shape()
            )));
        }
        let (r, c) = (v.dim(0), v.dim(1));
        let value = Tensor::new(vec![c, r], transpose_buf(v.data(), r, c))?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// NumPy-style broadcast (right-aligned, size-1 dimensions expand).
    pub fn broadcast_to(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let src = self.shape(a).to_vec();
        let ok = src.len() <= shape.len()
            && src
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(FrnError::Shape {
                op: "broadcast_to",
                lhs: src,
                rhs: shape,
            });
        }
        let map = broadcast_index_map(&src, &shape);
        let v = self.value(a).data();
        let data = map.iter().map(|&i| v[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("broadcast_to", value, Op::BroadcastTo(a), &[a])
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| FrnError::contract("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(FrnError::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(FrnError::contract(format!(
                "slice {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { x, start }, &[x])
    }

    /// Dense 2-D convolution `[Cin,H,W] ⊛ [Cout,Cin,k,k] → [Cout,Ho,Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(FrnError::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = conv_geom("conv2d", &sx, sw[2], stride, pad)?;
        let cout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(FrnError::Shape {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let p = geom.ho * geom.wo;
        let ckk = geom.cin * geom.k * geom.k;
        let mut out = vec![T::zero(); cout * p];
        {
            let xv = self.value(x).data();
            let cols = im2col_cow(xv, &geom);
            gemm(cout, ckk, p, self.value(w).data(), false, &cols, false, &mut out, false);
            if let Some(b) = bias {
                for (row, &bv) in out.chunks_mut(p).zip(self.value(b).data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(vec![cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { x, w, bias, geom }, &inputs)
    }

    /// Depthwise 2-D convolution: one `k×k` kernel per channel, stride 1.
    pub fn dwconv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[0] || sw[1] != sw[2] {
            return Err(FrnError::Shape {
                op: "dwconv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = conv_geom("dwconv2d", &sx, sw[1], 1, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [sx[0]] {
                return Err(FrnError::Shape {
                    op: "dwconv2d bias",
                    lhs: vec![sx[0]],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); geom.cin * geom.ho * geom.wo];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            let bv = bias.map(|b| self.value(b).data());
            dwconv_forward(xv, wv, bv, &geom, &mut out);
        }
        let value = Tensor::new(vec![geom.cin, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("dwconv2d", value, Op::DwConv2d { x, w, bias, geom }, &inputs)
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(FrnError::contract(format!("upsample2x expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..h {
                let src = &xv[(ci * h + y) * w..(ci * h + y + 1) * w];
                for dy in 0..2 {
                    let base = (ci * 2 * h + 2 * y + dy) * 2 * w;
                    let dst = &mut out[base..base + 2 * w];
                    for (xx, &v) in src.iter().enumerate() {
                        dst[2 * xx] = v;
                        dst[2 * xx + 1] = v;
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push("upsample2x", value, Op::Upsample2x(x), &[x])
    }

    /// Layer normalization over axis 0 (channels) at every remaining
    /// position, followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || self.shape(gamma) != [s[0]] || self.shape(beta) != [s[0]] {
            return Err(FrnError::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(FrnError::contract("layer_norm eps must be positive"));
        }
        let c = s[0];
        let p = self.value(x).numel() / c.max(1);
        let xv = self.value(x).data();
        let inv_c = T::of(1.0 / c as f64);
        let mut mean = vec![T::zero(); p];
        for row in xv.chunks(p) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for row in xv.chunks(p) {
            for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *acc += d * d;
            }
        }
        let eps_t = T::of(eps);
        let rstd: Vec<T> = var.iter().map(|&v| (v * inv_c + eps_t).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); c * p];
        let mut out = vec![T::zero(); c * p];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for ci in 0..c {
            let row = &xv[ci * p..(ci + 1) * p];
            let xh = &mut xhat[ci * p..(ci + 1) * p];
            let o = &mut out[ci * p..(ci + 1) * p];
            for i in 0..p {
                xh[i] = (row[i] - mean[i]) * rstd[i];
                o[i] = xh[i] * g[ci] + b[ci];
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean over axis 0, keeping it as a size-1 axis.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(FrnError::contract(format!("channel_mean of shape {s:?}")));
        }
        let c = s[0];
        let p = self.value(x).numel() / c;
        let mut out = vec![T::zero(); p];
        for row in self.value(x).data().chunks(p) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::of(1.0 / c as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = s;
        shape[0] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("channel_mean", value, Op::ChannelMean(x), &[x])
    }

    /// Records an externally computed op. `output` must be the forward value
    /// of `op` on `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let name = op.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are returned for
    /// every node that (transitively) depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(FrnError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, buf: Vec<T>| accumulate(grads, v, buf);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, zip_map(g, val(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    acc(*b, zip_map(g, val(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Neg(a) => acc(*a, g.iter().map(|&v| -v).collect()),
            Op::Exp(a) => acc(*a, zip_map(g, node.value.data(), |gv, y| gv * y)),
            Op::Sigmoid(a) => acc(
                *a,
                zip_map(g, node.value.data(), |gv, y| gv * y * (T::one() - y)),
            ),
            Op::Silu(a) => acc(
                *a,
                zip_map(g, val(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                }),
            ),
            Op::Softplus(a) => acc(*a, zip_map(g, val(*a), |gv, x| gv * sigmoid(x))),
            Op::Abs(a) => acc(
                *a,
                zip_map(g, val(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                acc(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                offsets,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bv = val(*b);
                    let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv[ob..ob + k * n],
                            true,
                            &mut ga[oa..oa + m * k],
                            true,
                        );
                    }
                    acc(*a, ga);
                }
                if self.needs(*b) {
                    let av = val(*a);
                    let mut gb = vec![T::zero(); self.nodes[b.0].value.numel()];
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        gemm(
                            k,
                            m,
                            n,
                            &av[oa..oa + m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[ob..ob + k * n],
                            true,
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                acc(*a, transpose_buf(g, s[0], s[1]));
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::BroadcastTo(a) => {
                let src = self.nodes[a.0].value.shape();
                let map = broadcast_index_map(src, node.value.shape());
                let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                for (&i, &gv) in map.iter().zip(g) {
                    ga[i] += gv;
                }
                acc(*a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.needs(p) {
                        acc(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.nodes[x.0].value.shape();
                let row: usize = xs[1..].iter().product();
                let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                gx[start * row..start * row + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Conv2d { x, w, bias, geom } => {
                let cout = node.value.dim(0);
                let p = geom.ho * geom.wo;
                let ckk = geom.cin * geom.k * geom.k;
                if self.needs(*w) {
                    let cols = im2col_cow(val(*x), geom);
                    let mut gw = vec![T::zero(); cout * ckk];
                    gemm(cout, p, ckk, g, false, &cols, true, &mut gw, false);
                    acc(*w, gw);
                }
                if self.needs(*x) {
                    let mut gcols = vec![T::zero(); ckk * p];
                    gemm(ckk, cout, p, val(*w), true, g, false, &mut gcols, false);
                    acc(*x, col2im(gcols, geom));
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    acc(b, g.chunks(p).map(|r| r.iter().copied().sum()).collect());
                }
            }
            Op::DwConv2d { x, w, bias, geom } => {
                let (gx, gw) = dwconv_backward(val(*x), val(*w), g, geom, self.needs(*x), self.needs(*w));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let p = geom.ho * geom.wo;
                    acc(b, g.chunks(p).map(|r| r.iter().copied().sum()).collect());
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        let dst = &mut gx[(ci * h + y) * w..(ci * h + y + 1) * w];
                        for dy in 0..2 {
                            let base = (ci * 2 * h + 2 * y + dy) * 2 * w;
                            let src = &g[base..base + 2 * w];
                            for (xx, d) in dst.iter_mut().enumerate() {
                                *d += src[2 * xx] + src[2 * xx + 1];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.nodes[gamma.0].value.numel();
                let p = xhat.len() / c;
                let gam = val(*gamma);
                if self.needs(*gamma) {
                    let gg = (0..c)
                        .map(|ci| {
                            let (gr, xr) = (&g[ci * p..(ci + 1) * p], &xhat[ci * p..(ci + 1) * p]);
                            gr.iter().zip(xr).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    acc(*gamma, gg);
                }
                if self.needs(*beta) {
                    acc(*beta, g.chunks(p).map(|r| r.iter().copied().sum()).collect());
                }
                if self.needs(*x) {
                    // gx = rstd·(gŷ − mean(gŷ) − x̂·mean(gŷ·x̂)), gŷ = g·γ
                    let mut m1 = vec![T::zero(); p];
                    let mut m2 = vec![T::zero(); p];
                    for ci in 0..c {
                        let gr = &g[ci * p..(ci + 1) * p];
                        let xr = &xhat[ci * p..(ci + 1) * p];
                        for i in 0..p {
                            let gh = gr[i] * gam[ci];
                            m1[i] += gh;
                            m2[i] += gh * xr[i];
                        }
                    }
                    let inv_c = T::of(1.0 / c as f64);
                    let mut gx = vec![T::zero(); c * p];
                    for ci in 0..c {
                        let gr = &g[ci * p..(ci + 1) * p];
                        let xr = &xhat[ci * p..(ci + 1) * p];
                        let out = &mut gx[ci * p..(ci + 1) * p];
                        for i in 0..p {
                            let gh = gr[i] * gam[ci];
                            out[i] = rstd[i] * (gh - m1[i] * inv_c - xr[i] * m2[i] * inv_c);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::ChannelMean(x) => {
                let c = self.nodes[x.0].value.dim(0);
                let inv = T::of(1.0 / c as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let mut gx = Vec::with_capacity(c * row.len());
                for _ in 0..c {
                    gx.extend_from_slice(&row);
                }
                acc(*x, gx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let out = op.backward(&values, &node.value, g, &needs);
                for ((v, gi), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        acc(*v, gi);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, buf: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&buf).for_each(|(e, &b)| *e += b),
        slot @ None => *slot = Some(buf),
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `|x|`.
#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn transpose_buf<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `dst`, the flat index of `src` it reads under
/// right-aligned broadcasting.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let n = dst.len();
    let lead = n - src.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[lead + i] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total: usize = dst.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn conv_geom(op: &'static str, sx: &[usize], k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (cin, h, w) = (sx[0], sx[1], sx[2]);
    if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
        return Err(FrnError::Shape {
            op,
            lhs: sx.to_vec(),
            rhs: vec![k, k],
        });
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    })
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

fn im2col_cow<'a, T: Real>(x: &'a [T], g: &ConvGeom) -> std::borrow::Cow<'a, [T]> {
    if is_pointwise(g) {
        return std::borrow::Cow::Borrowed(x);
    }
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    std::borrow::Cow::Owned(cols)
}

fn col2im<T: Real>(cols: Vec<T>, g: &ConvGeom) -> Vec<T> {
    if is_pointwise(g) {
        return cols;
    }
    let p = g.ho * g.wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Valid output-column range `[lo, hi)` for kernel column `kx`.
fn dw_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
    (lo, hi.max(lo))
}

fn dwconv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T]) {
    let k = g.k;
    for c in 0..g.cin {
        let o = &mut out[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[c]);
        }
        for ky in 0..k {
            for oy in 0..g.ho {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                let dst = &mut o[oy * g.wo..(oy + 1) * g.wo];
                for kx in 0..k {
                    let wv = w[(c * k + ky) * k + kx];
                    let (lo, hi) = dw_range(g, kx);
                    let shift = kx as isize - g.pad as isize;
                    let s = &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (d, &v) in dst[lo..hi].iter_mut().zip(s) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
}

fn dwconv_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let k = g.k;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for c in 0..g.cin {
        let go = &gout[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for ky in 0..k {
            for oy in 0..g.ho {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row = (c * g.h + iy as usize) * g.w;
                let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                for kx in 0..k {
                    let wi = (c * k + ky) * k + kx;
                    let (lo, hi) = dw_range(g, kx);
                    let shift = kx as isize - g.pad as isize;
                    let (a, b) = ((lo as isize + shift) as usize, (hi as isize + shift) as usize);
                    if let Some(gw) = gw.as_mut() {
                        let s: T = grow[lo..hi].iter().zip(&x[row + a..row + b]).map(|(&p, &q)| p * q).sum();
                        gw[wi] += s;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[wi];
                        for (d, &gv) in gx[row + a..row + b].iter_mut().zip(&grow[lo..hi]) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

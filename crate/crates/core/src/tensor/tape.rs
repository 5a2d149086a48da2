use super::kernels::{self, ConvGeom};
use super::{Align, Tensor, EPS};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    Upsample {
        input: Var,
        factor: usize,
        align: Align,
    },
    AvgPool {
        input: Var,
        k: usize,
    },
    MaskedL1 {
        pred: Var,
        target: Var,
        mask: Var,
        denom: f64,
    },
    WeightedMean {
        values: Var,
        weights: Var,
        denom: f64,
        clamped: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// `x[C, ...] + b[C]`, broadcasting the bias over trailing dimensions.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.first().ok_or_else(|| shape_err("add_channel_bias", "scalar input"))?;
        if self.shape(b) != [c] {
            return Err(shape_err(
                "add_channel_bias",
                format!("bias {:?} for input {xs:?}", self.shape(b)),
            ));
        }
        let inner = self.value(x).numel() / c.max(1);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (ci, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[ci]);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias(x, b), rg))
    }

    /// `x[N, C] + b[C]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.shape(b) != [c] {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&bias).for_each(|(v, bv)| *v += bv);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    /// `a[N, K] · b[K, M]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// 2D convolution of `input[C_in, H, W]` with `kernel[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).dims3()?;
        let ks = self.shape(kernel).to_vec();
        let [c_out, kc_in, kh, kw] = ks[..] else {
            return Err(shape_err("conv2d", format!("kernel must be rank 4, got {ks:?}")));
        };
        if kc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
        }
        let geom = ConvGeom::new(c_in, h, w, kh, stride, padding).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!("input {h}x{w} too small for kernel {kh} with padding {padding}"),
            )
        })?;
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; c_out * geom.pixels()];
        kernels::gemm_nn(self.value(kernel).data(), &cols, &mut out, c_out, geom.rows(), geom.pixels());
        let rg = self.rg(&[input, kernel]);
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Softmax over the last dimension of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise layer normalization of `x[N, C]` with affine `gain[C]`, `bias[C]`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm_rows", format!("affine params must be [{c}]")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&[n, c], out)?,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Each head uses a contiguous `C / heads` slice of the channel axis and
    /// computes `softmax(Q Kᵀ / √d) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, c) = self.value(q).dims2()?;
        let (nk, ck) = self.value(k).dims2()?;
        let (nv, cv) = self.value(v).dims2()?;
        if ck != c || cv != c || nv != nk {
            return Err(shape_err(
                "attention",
                format!("q [{nq},{c}], k [{nk},{ck}], v [{nv},{cv}]"),
            ));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({heads}) must divide channel count ({c})"
            )));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * c];
        for h in 0..heads {
            let qh = head_slice(qd, nq, c, h, d);
            let kh = head_slice(kd, nk, c, h, d);
            let vh = head_slice(vd, nk, c, h, d);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            kernels::gemm_nt(&qh, &kh, p, nq, d, nk);
            for row in p.chunks_mut(nk) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            let mut oh = vec![0.0; nq * d];
            kernels::gemm_nn(p, &vh, &mut oh, nq, nk, d);
            for r in 0..nq {
                out[r * c + h * d..r * c + (h + 1) * d].copy_from_slice(&oh[r * d..(r + 1) * d]);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&[nq, c], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Corner-aligned bilinear upsampling of `input[C, H, W]` by an integer factor.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        self.upsample_bilinear_aligned(input, factor, Align::Corners)
    }

    /// Bilinear upsampling with an explicit sample alignment.
    pub fn upsample_bilinear_aligned(&mut self, input: Var, factor: usize, align: Align) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Config(format!("upsample factor must be >= 1, got {factor}")));
        }
        let (c, h, w) = self.value(input).dims3()?;
        let (ho, wo) = (h * factor, w * factor);
        let ty = kernels::bilinear_axis(h, ho, align);
        let tx = kernels::bilinear_axis(w, wo, align);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    out[(ci * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&[c, ho, wo], out)?, Op::Upsample { input, factor, align }, rg))
    }

    /// Non-overlapping `k×k` average pooling of `input[C, H, W]`.
    pub fn avg_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!("avg_pool: {h}x{w} not divisible by {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ci * ho + y / k) * wo + xx / k] += x[(ci * h + y) * w + xx] * inv;
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&[c, ho, wo], out)?, Op::AvgPool { input, k }, rg))
    }

    /// `Σ |pred − target|·mask / max(Σ mask, ε)`
    pub fn masked_l1(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        self.same_shape("masked_l1", pred, target)?;
        self.same_shape("masked_l1", pred, mask)?;
        let (p, t, m) = (self.value(pred), self.value(target), self.value(mask));
        let denom = m.sum().max(EPS);
        let num: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .zip(m.data())
            .map(|((a, b), w)| (a - b).abs() * w)
            .sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(num / denom),
            Op::MaskedL1 {
                pred,
                target,
                mask,
                denom,
            },
            rg,
        ))
    }

    /// Weighted spatial mean `Σ_p v[c,p]·w[p] / max(Σ_p w[p], ε)` of
    /// `values[C, ...]` under `weights[1, ...]`; returns a `[C]` vector.
    pub fn weighted_mean(&mut self, values: Var, weights: Var) -> Result<Var> {
        let vs = self.shape(values).to_vec();
        let ws = self.shape(weights).to_vec();
        if vs.is_empty() || ws.is_empty() || ws[0] != 1 || vs[1..] != ws[1..] {
            return Err(shape_err("weighted_mean", format!("values {vs:?}, weights {ws:?}")));
        }
        let c = vs[0];
        let p = self.value(weights).numel();
        let wd = self.value(weights).data();
        let vd = self.value(values).data();
        let raw: f64 = wd.iter().sum();
        let clamped = raw < EPS;
        let denom = raw.max(EPS);
        let out: Vec<f64> = (0..c)
            .map(|ci| kernels::dot(&vd[ci * p..(ci + 1) * p], wd) / denom)
            .collect();
        let rg = self.rg(&[values, weights]);
        Ok(self.push(
            Tensor::new(&[c], out)?,
            Op::WeightedMean {
                values,
                weights,
                denom,
                clamped,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out and are left on every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(&shape, g)?);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::AddChannelBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let c = nodes[b.0].value.numel();
                let inner = g.len() / c.max(1);
                acc(*b, &mut |d| {
                    for (ci, chunk) in g.chunks(inner.max(1)).enumerate() {
                        d[ci] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let c = nodes[b.0].value.numel();
                acc(*b, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = nodes[a.0].value.dims2()?;
                let m = nodes[b.0].value.shape()[1];
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| kernels::gemm_nt(g, vb, d, n, m, k));
                acc(*b, &mut |d| kernels::gemm_tn(va, g, d, n, k, m));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2()?;
                let gt = kernels::transpose(g, c, r);
                acc(*a, &mut |d| add_into(d, &gt));
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let c_out = nodes[kernel.0].value.shape()[0];
                let (rows, pix) = (geom.rows(), geom.pixels());
                acc(*kernel, &mut |d| kernels::gemm_nt(g, cols, d, c_out, pix, rows));
                let kd = nodes[kernel.0].value.data();
                acc(*input, &mut |d| {
                    let mut dcols = vec![0.0; rows * pix];
                    kernels::gemm_tn(kd, g, &mut dcols, c_out, rows, pix);
                    kernels::col2im(&dcols, geom, d);
                });
            }
            Op::Relu(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if va[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * sigmoid(va[j]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        softmax_backward_row(yrow, grow, drow);
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.shape()[1];
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &mut |d| {
                    let cf = c as f64;
                    for (r, (drow, grow)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let xrow = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<f64> = (0..c).map(|j| grow[j] * gv[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += rstd[r] / cf * (cf * dxh[j] - s1 - xrow[j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (nq, c) = nodes[q.0].value.dims2()?;
                let nk = nodes[k.0].value.shape()[0];
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let mut dq = vec![0.0; nq * c];
                let mut dk = vec![0.0; nk * c];
                let mut dv = vec![0.0; nk * c];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let qh = head_slice(qd, nq, c, h, d);
                    let kh = head_slice(kd, nk, c, h, d);
                    let vh = head_slice(vd, nk, c, h, d);
                    let goh = head_slice(g, nq, c, h, d);
                    let mut dvh = vec![0.0; nk * d];
                    kernels::gemm_tn(p, &goh, &mut dvh, nq, nk, d);
                    let mut dp = vec![0.0; nq * nk];
                    kernels::gemm_nt(&goh, &vh, &mut dp, nq, d, nk);
                    let mut ds = vec![0.0; nq * nk];
                    for ((dsrow, dprow), prow) in
                        ds.chunks_mut(nk).zip(dp.chunks(nk)).zip(p.chunks(nk))
                    {
                        softmax_backward_row(prow, dprow, dsrow);
                        dsrow.iter_mut().for_each(|x| *x *= scale);
                    }
                    let mut dqh = vec![0.0; nq * d];
                    kernels::gemm_nn(&ds, &kh, &mut dqh, nq, nk, d);
                    let mut dkh = vec![0.0; nk * d];
                    kernels::gemm_tn(&ds, &qh, &mut dkh, nq, nk, d);
                    scatter_head(&mut dq, &dqh, nq, c, h, d);
                    scatter_head(&mut dk, &dkh, nk, c, h, d);
                    scatter_head(&mut dv, &dvh, nk, c, h, d);
                }
                acc(*q, &mut |x| add_into(x, &dq));
                acc(*k, &mut |x| add_into(x, &dk));
                acc(*v, &mut |x| add_into(x, &dv));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    let slice = &g[offset..offset + n];
                    acc(*p, &mut |d| add_into(d, slice));
                    offset += n;
                }
            }
            Op::Upsample { input, factor, align } => {
                let (c, h, w) = nodes[input.0].value.dims3()?;
                let (ho, wo) = (h * factor, w * factor);
                let ty = kernels::bilinear_axis(h, ho, *align);
                let tx = kernels::bilinear_axis(w, wo, *align);
                acc(*input, &mut |d| {
                    for ci in 0..c {
                        let dst = &mut d[ci * h * w..(ci + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let go = g[(ci * ho + oy) * wo + ox];
                                dst[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                dst[y0 * w + x1] += go * (1.0 - fy) * fx;
                                dst[y1 * w + x0] += go * fy * (1.0 - fx);
                                dst[y1 * w + x1] += go * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::AvgPool { input, k } => {
                let (c, h, w) = nodes[input.0].value.dims3()?;
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                acc(*input, &mut |d| {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                d[(ci * h + y) * w + x] += g[(ci * ho + y / k) * wo + x / k] * inv;
                            }
                        }
                    }
                });
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                denom,
            } => {
                let (p, t, m) = (
                    nodes[pred.0].value.data(),
                    nodes[target.0].value.data(),
                    nodes[mask.0].value.data(),
                );
                let coef = g[0] / denom;
                acc(*pred, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += coef * m[j] * sign(p[j] - t[j]);
                    }
                });
                acc(*target, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= coef * m[j] * sign(p[j] - t[j]);
                    }
                });
            }
            Op::WeightedMean {
                values,
                weights,
                denom,
                clamped,
            } => {
                let vd = nodes[values.0].value.data();
                let wd = nodes[weights.0].value.data();
                let out = node.value.data();
                let p = wd.len();
                acc(*values, &mut |d| {
                    for (ci, gc) in g.iter().enumerate() {
                        for j in 0..p {
                            d[ci * p + j] += gc * wd[j] / denom;
                        }
                    }
                });
                acc(*weights, &mut |d| {
                    for (ci, gc) in g.iter().enumerate() {
                        let shift = if *clamped { 0.0 } else { out[ci] };
                        for j in 0..p {
                            d[j] += gc * (vd[ci * p + j] - shift) / denom;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn softmax_backward_row(y: &[f64], gy: &[f64], dx: &mut [f64]) {
    let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    for j in 0..y.len() {
        dx[j] += y[j] * (gy[j] - s);
    }
}

fn head_slice(x: &[f64], rows: usize, c: usize, h: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&x[r * c + h * d..r * c + (h + 1) * d]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], rows: usize, c: usize, h: usize, d: usize) {
    for r in 0..rows {
        dst[r * c + h * d..r * c + (h + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough state to
//! replay its backward rule. [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates gradients for every node that
//! (transitively) depends on a leaf created with `requires_grad`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, bilinear_axis, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding mode for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    Same,
    Valid,
}

/// Backward rule of a user-defined op: given the inputs, the forward output
/// and the output gradient, returns one gradient buffer per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

/// Lower clamp applied to probabilities inside the cross-entropy op.
pub const PROB_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelScale {
        x: Var,
        gate: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Bce {
        logits: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        prob: Vec<f64>,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Upsample(_) => "upsample_bilinear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "fully_connected",
            Op::Concat(_) => "concat",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ChannelScale { .. } => "channel_scale",
            Op::MaxPool2 { .. } => "maxpool2d",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce_with_logits",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Records operations for one forward pass. Single-owner; build a fresh
/// tape per pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient buffer of `v`, if `v` required a gradient and was
    /// reached from the loss.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Logits, targets and weights of one cross-entropy node.
#[derive(Clone, Copy, Debug)]
pub struct BceInputs<'a> {
    pub logits: &'a [f64],
    pub target: &'a [f64],
    pub weight: &'a [f64],
}

/// Location of the first non-finite forward value on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct NonFiniteReport {
    pub node: usize,
    pub op: &'static str,
    pub label: Option<String>,
    pub shape: Vec<usize>,
}

impl core::fmt::Display for NonFiniteReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "node #{} ({}", self.node, self.op)?;
        if let Some(label) = &self.label {
            write!(f, " `{label}`")?;
        }
        write!(f, ", shape {:?})", self.shape)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
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
        self.rg(v)
    }

    /// Attaches a human-readable name used in diagnostics.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn label(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].label.as_deref()
    }

    /// First node, in recording order, whose forward value is not finite.
    pub fn first_non_finite(&self) -> Option<NonFiniteReport> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| NonFiniteReport {
                node: i,
                op: n.op.name(),
                label: n.label.clone(),
                shape: n.value.shape().to_vec(),
            })
        })
    }

    /// Fingerprint of which side of every non-smooth point the forward
    /// pass took: ReLU input signs, max-pool winners and probability
    /// clamps. Two passes with equal fingerprints lie on the same smooth
    /// piece of the recorded function.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(x) => {
                    mix(i as u64);
                    for &v in self.nodes[x.0].value.data() {
                        mix(u64::from(v > 0.0));
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    mix(i as u64);
                    for &a in argmax {
                        mix(a as u64);
                    }
                }
                Op::Bce { prob, .. } => {
                    mix(i as u64);
                    for &p in prob {
                        mix(u64::from(p < PROB_EPS) | (u64::from(p > 1.0 - PROB_EPS) << 1));
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Inputs of every `bce_with_logits` node in recording order.
    pub fn bce_inputs(&self) -> Vec<BceInputs<'_>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Bce {
                    logits,
                    target,
                    weight,
                    ..
                } => Some(BceInputs {
                    logits: self.nodes[logits.0].value.data(),
                    target,
                    weight,
                }),
                _ => None,
            })
            .collect()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank(2, "matmul lhs")?;
        bv.expect_rank(2, "matmul rhs")?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(shape_err(format!(
                "matmul: inner extents differ ({m}×{k} · {k2}×{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, av.data(), bv.data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(2, "transpose")?;
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let out = transpose2(r, c, xv.data());
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(invalid(format!(
                "softmax axis {axis} out of range for shape {}",
                xv.describe()
            )));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = libm::exp(src[idx(j)] - max);
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    // ---- convolution and pooling -----------------------------------------

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw()?;
        let wv = self.value(w);
        wv.expect_rank(4, "conv2d kernel")?;
        let (c_out, kc, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if kc != c_in {
            return Err(shape_err(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(invalid(format!(
                "conv2d: kernel must be square and odd, got {k}×{k2}"
            )));
        }
        if stride == 0 {
            return Err(invalid("conv2d: stride must be ≥ 1"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err(format!(
                    "conv2d: bias shape {} does not match {c_out} output channels",
                    self.value(b).describe()
                )));
            }
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(format!(
                "conv2d: {k}×{k} kernel does not fit a {h}×{wd} input"
            )));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let n_out = geom.out_pixels();
        let mut out = vec![0.0; c_out * n_out];
        if let Some(b) = b {
            for (co, &bias) in self.value(b).data().iter().enumerate() {
                out[co * n_out..(co + 1) * n_out].fill(bias);
            }
        }
        let xd = self.value(x).data();
        let wd_ = self.value(w).data();
        if geom.is_pointwise() {
            kernels::gemm_nn(c_out, c_in, n_out, wd_, xd, &mut out);
        } else {
            let mut cols = vec![0.0; geom.col_rows() * n_out];
            geom.im2col(xd, &mut cols);
            kernels::gemm_nn(c_out, geom.col_rows(), n_out, wd_, &cols, &mut out);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// 2×2 max pooling with stride 2. An extent of 1 is passed through.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let ho = if h == 1 { 1 } else { h / 2 };
        let wo = if w == 1 { 1 } else { w / 2 };
        let (sy, sx) = (usize::from(h > 1) + 1, usize::from(w > 1) + 1);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for dy in 0..sy {
                        for dx in 0..sx {
                            let i = (ch * h + oy * sy + dy) * w + ox * sx + dx;
                            if best_i == usize::MAX || src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    /// Corner-aligned bilinear resize of `[C, H, W]` to `[C, h, w]`.
    pub fn upsample_bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(invalid("upsample_bilinear: target extents must be ≥ 1"));
        }
        let rg = self.rg(x);
        if (th, tw) == (h, w) {
            let value = self.value(x).clone();
            return Ok(self.push(value, Op::Upsample(x), rg));
        }
        let out = bilinear_forward(self.value(x).data(), c, (h, w), (th, tw));
        Ok(self.push(
            Tensor::from_parts(vec![c, th, tw], out),
            Op::Upsample(x),
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = (h * w) as f64;
        let xv = self.value(x);
        let out = (0..c)
            .map(|ch| xv.channel(ch).iter().sum::<f64>() / n)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(x), rg))
    }

    /// Affine map `w · x + b` with `x: [D_in]`, `w: [D_out, D_in]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        xv.expect_rank(1, "fully_connected input")?;
        wv.expect_rank(2, "fully_connected weight")?;
        let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
        if d_in != xv.len() {
            return Err(shape_err(format!(
                "fully_connected: weight expects {d_in} inputs, got {}",
                xv.len()
            )));
        }
        let mut out: Vec<f64> = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [d_out] {
                    return Err(shape_err(format!(
                        "fully_connected: bias shape {} does not match {d_out} outputs",
                        bv.describe()
                    )));
                }
                bv.data().to_vec()
            }
            None => vec![0.0; d_out],
        };
        for (o, out_o) in out.iter_mut().enumerate() {
            *out_o += kernels::dot(&wv.data()[o * d_in..(o + 1) * d_in], xv.data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![d_out], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(shape_err(format!(
                "{what}: operand shapes differ ({} vs {})",
                self.value(a).describe(),
                self.value(b).describe()
            )))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let out = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// `out[c, :, :] = x[c, :, :] · gate[c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(gate) != [c] {
            return Err(shape_err(format!(
                "channel_scale: gate shape {} does not match {c} channels",
                self.value(gate).describe()
            )));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i / plane])
            .collect();
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::ChannelScale { x, gate },
            rg,
        ))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| invalid("concat of zero tensors"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.value(first).rank() == 0 {
            return Err(shape_err("concat: operands must have rank ≥ 1"));
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(format!(
                    "concat: trailing extents differ ({} vs {:?})",
                    self.value(x).describe(),
                    tail
                )));
            }
            lead += s[0];
            out.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Weighted binary cross entropy on `sigmoid(logits)`, summed over all
    /// elements: `−Σ w_j [y_j ln p_j + (1 − y_j) ln(1 − p_j)]`, with `p`
    /// clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: &Tensor,
        weight: &Tensor,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() || lv.shape() != weight.shape() {
            return Err(shape_err(format!(
                "bce_with_logits: logits {}, target {}, weight {} must agree",
                lv.describe(),
                target.describe(),
                weight.describe()
            )));
        }
        let prob: Vec<f64> = lv.data().iter().map(|&z| sigmoid(z)).collect();
        let mut total = 0.0;
        for ((&p, &y), &wt) in prob.iter().zip(target.data()).zip(weight.data()) {
            if wt == 0.0 {
                continue;
            }
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total -= wt * (y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                logits,
                target: target.data().to_vec(),
                weight: weight.data().to_vec(),
                prob,
            },
            rg,
        ))
    }

    /// Records a user-defined op with an explicit backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: CustomBackward,
    ) -> Var {
        let rg = inputs.iter().any(|&x| self.rg(x));
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.describe()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |da| kernels::gemm_nt(m, n, k, g, bv.data(), da));
                acc(*b, &mut |db| kernels::gemm_tn(k, m, n, av.data(), g, db));
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let t = transpose2(s[0], s[1], g);
                acc(*x, &mut |dx| add_into(dx, &t));
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dotp: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = node.value.shape()[0];
                let n_out = geom.out_pixels();
                let rows = geom.col_rows();
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += g[co * n_out..(co + 1) * n_out].iter().sum::<f64>();
                        }
                    });
                }
                let xd = val(*x).data();
                let wd = val(*w).data();
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                if geom.is_pointwise() {
                    if need_w {
                        acc(*w, &mut |dw| {
                            kernels::gemm_nt(c_out, n_out, rows, g, xd, dw)
                        });
                    }
                    if need_x {
                        acc(*x, &mut |dx| {
                            kernels::gemm_tn(rows, c_out, n_out, wd, g, dx)
                        });
                    }
                } else {
                    if need_w {
                        let mut cols = vec![0.0; rows * n_out];
                        geom.im2col(xd, &mut cols);
                        acc(*w, &mut |dw| {
                            kernels::gemm_nt(c_out, n_out, rows, g, &cols, dw)
                        });
                    }
                    if need_x {
                        let mut dcols = vec![0.0; rows * n_out];
                        kernels::gemm_tn(rows, c_out, n_out, wd, g, &mut dcols);
                        acc(*x, &mut |dx| geom.col2im(&dcols, dx));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Upsample(x) => {
                let (c, h, w) = val(*x).chw().expect("rank-3 by construction");
                let (th, tw) = (node.value.shape()[1], node.value.shape()[2]);
                if (th, tw) == (h, w) {
                    acc(*x, &mut |dx| add_into(dx, g));
                } else {
                    acc(*x, &mut |dx| bilinear_backward(g, c, (h, w), (th, tw), dx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = val(*x).chw().expect("rank-3 by construction");
                let plane = h * w;
                let n = plane as f64;
                acc(*x, &mut |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i / plane] / n;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = val(*x).data();
                let wv = val(*w).data();
                let d_in = xv.len();
                if let Some(b) = b {
                    acc(*b, &mut |db| add_into(db, g));
                }
                acc(*w, &mut |dw| {
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &xi) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xv) {
                            *d += go * xi;
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &wi) in dx.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                            *d += go * wi;
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).len();
                    acc(x, &mut |dx| add_into(dx, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |dx| {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * f;
                }
            }),
            Op::ChannelScale { x, gate } => {
                let xv = val(*x);
                let plane = xv.shape()[1] * xv.shape()[2];
                let gv = val(*gate).data();
                acc(*x, &mut |dx| {
                    for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gi * gv[i / plane];
                    }
                });
                acc(*gate, &mut |dg| {
                    for (c, d) in dg.iter_mut().enumerate() {
                        *d += kernels::dot(&g[c * plane..(c + 1) * plane], xv.channel(c));
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |dx| {
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Bce {
                logits,
                target,
                weight,
                prob,
            } => acc(*logits, &mut |dz| {
                for (i, d) in dz.iter_mut().enumerate() {
                    let p = prob[i];
                    // The clamp is flat outside [eps, 1 − eps].
                    if weight[i] != 0.0 && (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        *d += g[0] * weight[i] * (p - target[i]);
                    }
                }
            }),
            Op::Custom {
                inputs, backward, ..
            } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let parts = backward(&ins, &node.value, g);
                for (&x, part) in inputs.iter().zip(parts) {
                    acc(x, &mut |dx| add_into(dx, &part));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose2(r: usize, c: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn bilinear_forward(
    src: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<f64> {
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out[(ch * th + oy) * tw + ox] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

fn bilinear_backward(
    g: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    dx: &mut [f64],
) {
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gi = g[(ch * th + oy) * tw + ox];
                plane[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += gi * (1.0 - fy) * fx;
                plane[y1 * w + x0] += gi * fy * (1.0 - fx);
                plane[y1 * w + x1] += gi * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("inner extents")));
    }

    #[test]
    fn softmax_small_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[0.0, libm::log(3.0)]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn conv_identity_and_constant_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let w3 = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b2 = tape.constant(Tensor::full(&[1], 2.0));
        let y = tape.conv2d(x, w3, Some(b2), 1, Padding::Same).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, None, 1, Padding::Same),
            Err(Error::Shape(_))
        ));
        let w = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            tape.conv2d(x, w, None, 1, Padding::Same),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 1.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.data(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_interpolates_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = tape.upsample_bilinear(x, (2, 4)).unwrap();
        let d = tape.value(y).data();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for r in 0..2 {
            for c in 0..4 {
                assert!((d[r * 4 + c] - want[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn upsample_same_size_is_bit_identical() {
        let mut tape = Tape::new();
        let src = t(&[1, 2, 2], &[-0.0, f64::MIN_POSITIVE, 1e300, -3.25]);
        let x = tape.constant(src.clone());
        let y = tape.upsample_bilinear(x, (2, 2)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(tape.value(y)), bits(&src));
    }

    #[test]
    fn pooling_and_fc_small_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 2], &[3.0, 3.0, 3.0, 3.0, 0.0, 1.0, 1.0, 0.0]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 0.5]);

        let v = tape.constant(t(&[3], &[1.0, -2.0, 3.0]));
        let eye = tape.constant(Tensor::eye(3));
        let y = tape.fully_connected(v, eye, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = tape.fully_connected(v, zero, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);
        assert!(tape.fully_connected(v, b, None).is_err());
    }

    #[test]
    fn concat_mul_and_maxpool_small_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2, 2], 2.0));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2, 2]);
        let bad = tape.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(tape.concat(&[a, bad]).is_err());

        let ones = tape.constant(Tensor::ones(&[2, 2, 2]));
        let m = tape.mul(b, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(b));
        assert!(tape.mul(a, b).is_err());

        let k = tape.constant(Tensor::full(&[1, 4, 4], 7.0));
        let p = tape.maxpool2d(k).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2]);
        assert!(tape.value(p).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.data(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.data(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.data(x).unwrap(), &[3.0, 4.0]);
        assert!(g.data(c).is_none());
    }

    #[test]
    fn first_non_finite_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, f64::NAN]));
        tape.set_label(x, "input");
        let _ = tape.relu(x);
        let rep = tape.first_non_finite().unwrap();
        assert_eq!(rep.node, 0);
        assert_eq!(rep.label.as_deref(), Some("input"));
    }
}

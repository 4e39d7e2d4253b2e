//! Edge refinement module and the feature fusion gate.
//!
//! The refinement module turns a merge of a low-level and a high-level side
//! output into five progressively refined edge features, each supervised
//! with a class-balanced cross entropy. The fusion gate brings non-local,
//! decoder and edge features to a stage's resolution and width, gates the
//! first two with the edge feature, and reweights the concatenation with
//! squeeze-style channel attention.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::params::{Conv, Graph, Init, Linear, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Reduction between a sum over pixels and a per-pixel mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossNorm {
    #[default]
    Mean,
    Sum,
}

/// Edge refinement parameters: the merge conv producing `E⁰`, five
/// refinement blocks and their single-channel prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ErmParams {
    pub merge: Conv,
    pub blocks: Vec<Conv>,
    pub heads: Vec<Conv>,
}

impl ErmParams {
    /// `low` and `high` are the channel widths of the two side outputs;
    /// edge features keep the width of `low`. `relu_gain` scales the
    /// init bound of the convs followed by a ReLU.
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        low: usize,
        high: usize,
        count: usize,
        relu_gain: f64,
    ) -> Result<Self> {
        let merge = Conv::with_gain(params, init, "erm.merge", low + high, low, 3, relu_gain)?;
        let blocks = (1..=count)
            .map(|i| {
                Conv::with_gain(
                    params,
                    init,
                    &format!("erm.block{i}"),
                    low,
                    low,
                    3,
                    relu_gain,
                )
            })
            .collect::<Result<_>>()?;
        let heads = (1..=count)
            .map(|i| Conv::new(params, init, &format!("erm.head{i}"), low, 1, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            merge,
            blocks,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.merge.c_out
    }
}

/// `E⁰ = relu(merge(cat(up(s_high → s_low), s_low)))`, then
/// `Eⁱ = relu(blockᵢ(Eⁱ⁻¹))`. Returns `[E¹, …, Eⁿ]` at `s_low`'s size.
pub fn erm_forward(g: &mut Graph, s_low: Var, s_high: Var, p: &ErmParams) -> Result<Vec<Var>> {
    let (_, h, w) = g.tape.value(s_low).chw()?;
    let up = g.tape.upsample_bilinear(s_high, (h, w))?;
    let cat = g.tape.concat(&[up, s_low])?;
    let mut e = p.merge.forward_relu(g, cat)?;
    let mut out = Vec::with_capacity(p.blocks.len());
    for (i, block) in p.blocks.iter().enumerate() {
        e = block.forward_relu(g, e)?;
        g.tape.set_label(e, format!("E{}", i + 1));
        out.push(e);
    }
    Ok(out)
}

/// Per-pixel weights `(λ₊, λ₋)` for a binary edge map: each class is
/// weighted by the other class's share of the pixels.
pub fn edge_class_weights(gt_edge: &Tensor) -> (f64, f64) {
    let n = gt_edge.len() as f64;
    let pos = gt_edge.data().iter().filter(|&&v| v > 0.5).count() as f64;
    let neg = n - pos;
    (neg / n, pos / n)
}

fn logits_at(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    let (gc, gh, gw) = gt.chw()?;
    if gc != 1 {
        return Err(shape_err(format!(
            "ground truth must be single-channel, got {gc} channels"
        )));
    }
    g.tape.upsample_bilinear(logits, (gh, gw))
}

fn normalize(g: &mut Graph, total: Var, pixels: usize, norm: LossNorm) -> Var {
    match norm {
        LossNorm::Mean => g.tape.scale(total, 1.0 / pixels as f64),
        LossNorm::Sum => total,
    }
}

/// Class-balanced cross entropy between `sigmoid(head(e))`, resized to the
/// ground truth, and a binary edge map `gt_edge: [1, H, W]`.
pub fn edge_loss(
    g: &mut Graph,
    e: Var,
    head: &Conv,
    gt_edge: &Tensor,
    norm: LossNorm,
) -> Result<Var> {
    let logits = head.forward(g, e)?;
    let logits = logits_at(g, logits, gt_edge)?;
    let (pos_w, neg_w) = edge_class_weights(gt_edge);
    let weight = gt_edge.map(|v| if v > 0.5 { pos_w } else { neg_w });
    let target = gt_edge.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let total = g.tape.bce_with_logits(logits, &target, &weight)?;
    Ok(normalize(g, total, gt_edge.len(), norm))
}

/// Unweighted cross entropy between `sigmoid(logits)`, resized to the
/// ground truth, and a binary saliency mask `gt: [1, H, W]`.
pub fn saliency_loss(g: &mut Graph, logits: Var, gt: &Tensor, norm: LossNorm) -> Result<Var> {
    let logits = logits_at(g, logits, gt)?;
    let target = gt.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let weight = Tensor::ones(gt.shape());
    let total = g.tape.bce_with_logits(logits, &target, &weight)?;
    Ok(normalize(g, total, gt.len(), norm))
}

/// `up(relu(θ(x)); size)`: brings a feature to a stage's width and size.
pub fn unify(g: &mut Graph, x: Var, size: (usize, usize), theta: &Conv) -> Result<Var> {
    let y = theta.forward_relu(g, x)?;
    g.tape.upsample_bilinear(y, size)
}

/// Two-layer bottleneck gate over globally pooled channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelAttention {
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: Linear::new(params, init, &format!("{name}.fc1"), channels, hidden)?,
            excite: Linear::new(params, init, &format!("{name}.fc2"), hidden, channels)?,
        })
    }
}

/// Per-channel gate `σ(fc₂(relu(fc₁(avgpool(x)))))`.
pub fn channel_gate(g: &mut Graph, x: Var, p: &ChannelAttention) -> Result<Var> {
    let pooled = g.tape.global_avg_pool(x)?;
    let hidden = p.squeeze.forward(g, pooled)?;
    let hidden = g.tape.relu(hidden);
    let logits = p.excite.forward(g, hidden)?;
    Ok(g.tape.sigmoid(logits))
}

/// `x[c] · gate[c]`
pub fn channel_attention(g: &mut Graph, x: Var, p: &ChannelAttention) -> Result<Var> {
    let gate = channel_gate(g, x, p)?;
    g.tape.channel_scale(x, gate)
}

/// `CA(cat(s, n̂ ⊗ ê, f̂ ⊗ ê))`. All four inputs must share one shape.
pub fn ffg_fuse(
    g: &mut Graph,
    s: Var,
    n_hat: Var,
    f_hat: Var,
    e_hat: Var,
    p: &ChannelAttention,
) -> Result<Var> {
    let gated_n = g.tape.mul(n_hat, e_hat)?;
    let gated_f = g.tape.mul(f_hat, e_hat)?;
    let cat = g.tape.concat(&[s, gated_n, gated_f])?;
    channel_attention(g, cat, p)
}

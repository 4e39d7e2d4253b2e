//! Dual-space non-local blocks and their multi-hop stack.
//!
//! A block sees its input `A: [C, H, W]` as `C × K` with `K = H·W`. The
//! spatial branch attends over the `K` positions using query/key/value
//! projections, the channel branch attends over the `C` channels of `A`
//! itself, and a 1×1 convolution merges the two residual outputs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{Conv, Graph, Init, ParamSet};
use crate::tape::{Tape, Var};

/// Axis of the similarity matrix the softmax normalizes over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SimilarityAxis {
    /// Each row (fixed query, varying key) sums to one.
    #[default]
    Key,
    /// Each column sums to one.
    Query,
}

impl SimilarityAxis {
    fn axis(self) -> usize {
        match self {
            SimilarityAxis::Key => 1,
            SimilarityAxis::Query => 0,
        }
    }
}

/// Which branches a dual-space block aggregates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Branches {
    #[default]
    Both,
    SpatialOnly,
    ChannelOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NonLocalConfig {
    pub axis: SimilarityAxis,
    pub branches: Branches,
}

/// Projections of one dual-space non-local block. All four are 1×1
/// convolutions mapping `C → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct DsnlbParams {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub out: Conv,
}

impl DsnlbParams {
    pub fn new(params: &mut ParamSet, init: &Init, name: &str, channels: usize) -> Result<Self> {
        Self::configured(params, init, name, channels, SimilarityAxis::Key, 1.0)
    }

    /// The projection on the side the similarity softmax does not run
    /// over gets no bias: its bias only shifts whole softmax rows (or
    /// columns), so it would cancel exactly and never receive a gradient.
    /// `out_gain` scales the initial range of the output projection.
    pub fn configured(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        channels: usize,
        axis: SimilarityAxis,
        out_gain: f64,
    ) -> Result<Self> {
        let mk = |params: &mut ParamSet, part: &str, biased: bool| {
            let name = format!("{name}.{part}");
            if biased {
                Conv::new(params, init, &name, channels, channels, 1)
            } else {
                Conv::unbiased(params, init, &name, channels, channels, 1, 1.0)
            }
        };
        let key_axis = axis == SimilarityAxis::Key;
        Ok(Self {
            query: mk(params, "query", key_axis)?,
            key: mk(params, "key", !key_axis)?,
            value: mk(params, "value", true)?,
            out: Conv::with_gain(
                params,
                init,
                &format!("{name}.out"),
                channels,
                channels,
                1,
                out_gain,
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.out.c_out
    }
}

/// The ordered block stack; `blocks[i]` produces the feature for decoder
/// stage `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NlgmParams {
    pub blocks: Vec<DsnlbParams>,
}

impl NlgmParams {
    pub fn new(params: &mut ParamSet, init: &Init, channels: usize, count: usize) -> Result<Self> {
        Self::configured(params, init, channels, count, SimilarityAxis::Key, 1.0)
    }

    pub fn configured(
        params: &mut ParamSet,
        init: &Init,
        channels: usize,
        count: usize,
        axis: SimilarityAxis,
        out_gain: f64,
    ) -> Result<Self> {
        let blocks = (1..=count)
            .map(|i| {
                let name = format!("nlgm.block{i}");
                DsnlbParams::configured(params, init, &name, channels, axis, out_gain)
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

fn flatten(tape: &mut Tape, x: Var) -> Result<(Var, [usize; 3])> {
    let (c, h, w) = tape.value(x).chw()?;
    Ok((tape.reshape(x, &[c, h * w])?, [c, h, w]))
}

/// Spatial branch returning `(SN, S)`, where `S: [K, K]` is the
/// normalized position similarity.
pub fn spatial_nonlocal_parts(
    g: &mut Graph,
    a: Var,
    p: &DsnlbParams,
    axis: SimilarityAxis,
) -> Result<(Var, Var)> {
    let b = p.query.forward(g, a)?;
    let c = p.key.forward(g, a)?;
    let d = p.value.forward(g, a)?;
    let tape = &mut g.tape;
    let (b, shape) = flatten(tape, b)?;
    let (c, _) = flatten(tape, c)?;
    let (d, _) = flatten(tape, d)?;
    let bt = tape.transpose(b)?;
    let logits = tape.matmul(bt, c)?;
    let s = tape.softmax(logits, axis.axis())?;
    // (D · Sᵀ)[c, i] = Σ_j D[c, j] · S[i, j]
    let st = tape.transpose(s)?;
    let attended = tape.matmul(d, st)?;
    let attended = tape.reshape(attended, &shape)?;
    Ok((tape.add(attended, a)?, s))
}

/// `SN = reshape(D · Sᵀ) + A` with `S = softmax(Bᵀ · C)`.
pub fn spatial_nonlocal(
    g: &mut Graph,
    a: Var,
    p: &DsnlbParams,
    axis: SimilarityAxis,
) -> Result<Var> {
    Ok(spatial_nonlocal_parts(g, a, p, axis)?.0)
}

/// Channel branch returning `(CN, X)`, where `X: [C, C]` is the
/// normalized channel similarity.
pub fn channel_nonlocal_parts(tape: &mut Tape, a: Var, axis: SimilarityAxis) -> Result<(Var, Var)> {
    let (flat, shape) = flatten(tape, a)?;
    let ft = tape.transpose(flat)?;
    let logits = tape.matmul(flat, ft)?;
    let x = tape.softmax(logits, axis.axis())?;
    let xt = tape.transpose(x)?;
    let mixed = tape.matmul(xt, flat)?;
    let mixed = tape.reshape(mixed, &shape)?;
    Ok((tape.add(mixed, a)?, x))
}

/// `CN = reshape(Xᵀ · A) + A` with `X = softmax(A · Aᵀ)`.
pub fn channel_nonlocal(tape: &mut Tape, a: Var, axis: SimilarityAxis) -> Result<Var> {
    Ok(channel_nonlocal_parts(tape, a, axis)?.0)
}

/// One dual-space block: `N = D_N(SN + CN)`.
pub fn dsnlb(g: &mut Graph, a: Var, p: &DsnlbParams, cfg: NonLocalConfig) -> Result<Var> {
    let merged = match cfg.branches {
        Branches::Both => {
            let sn = spatial_nonlocal(g, a, p, cfg.axis)?;
            let cn = channel_nonlocal(&mut g.tape, a, cfg.axis)?;
            g.tape.add(sn, cn)?
        }
        Branches::SpatialOnly => spatial_nonlocal(g, a, p, cfg.axis)?,
        Branches::ChannelOnly => channel_nonlocal(&mut g.tape, a, cfg.axis)?,
    };
    p.out.forward(g, merged)
}

/// Multi-hop refinement: the last block reads `source`, every earlier
/// block reads the output of the block after it. Returns `[N¹, …, Nⁿ]`.
pub fn nlgm_forward(
    g: &mut Graph,
    source: Var,
    p: &NlgmParams,
    cfg: NonLocalConfig,
) -> Result<Vec<Var>> {
    let n = p.blocks.len();
    let mut out = alloc::vec![source; n];
    let mut current = source;
    for i in (0..n).rev() {
        current = dsnlb(g, current, &p.blocks[i], cfg)?;
        g.tape.set_label(current, format!("N{}", i + 1));
        out[i] = current;
    }
    Ok(out)
}

//! The saliency network: a six-stage bottom-up backbone, the non-local
//! guidance stack, edge refinement, the top-down decoder with per-stage
//! fusion, and coarse-to-fine final inference.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::fusion::{
    channel_attention, edge_loss, erm_forward, saliency_loss, unify, ChannelAttention, ErmParams,
    LossNorm,
};
use crate::image::SaliencyMap;
use crate::nlgm::{nlgm_forward, NlgmParams, NonLocalConfig};
use crate::params::{Conv, Graph, Init, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Number of backbone side outputs.
pub const STAGES: usize = 6;
/// Number of fused decoder stages (every stage except the deepest).
pub const FUSED_STAGES: usize = STAGES - 1;
/// Largest backbone stride.
pub const MAX_STRIDE: usize = 1 << (STAGES - 1);

/// Where the non-local stack reads from and how its outputs reach the
/// decoder stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NlgmArch {
    /// (a) one block on `S⁶`, its output shared by every stage.
    SingleShared,
    /// (b) five stacked blocks on `S⁶`, the last output shared.
    StackShared,
    /// (c) five blocks on `S⁶`, one output per stage.
    PerStageFromTop,
    /// (d) five blocks on `S⁵`, one output per stage.
    #[default]
    PerStage,
}

impl NlgmArch {
    pub fn source_stage(self) -> usize {
        match self {
            NlgmArch::PerStage => 5,
            _ => 6,
        }
    }

    pub fn block_count(self) -> usize {
        match self {
            NlgmArch::SingleShared => 1,
            _ => FUSED_STAGES,
        }
    }

    pub fn shared(self) -> bool {
        matches!(self, NlgmArch::SingleShared | NlgmArch::StackShared)
    }

    pub fn letter(self) -> char {
        match self {
            NlgmArch::SingleShared => 'a',
            NlgmArch::StackShared => 'b',
            NlgmArch::PerStageFromTop => 'c',
            NlgmArch::PerStage => 'd',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Some(match c {
            'a' => NlgmArch::SingleShared,
            'b' => NlgmArch::StackShared,
            'c' => NlgmArch::PerStageFromTop,
            'd' => NlgmArch::PerStage,
            _ => return None,
        })
    }
}

/// Weight init. Every bound is `gain/√fan_in`; the schemes differ in the
/// gain of convolutions followed by a ReLU (backbone, decoder, edge and
/// unification convs). Heads, projections and the non-local blocks always
/// use gain 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// `√6`, which keeps activation variance through ReLU layers.
    #[default]
    He,
    /// 1 everywhere.
    Uniform,
}

impl InitScheme {
    pub fn relu_gain(self) -> f64 {
        match self {
            InitScheme::He => libm::sqrt(6.0),
            InitScheme::Uniform => 1.0,
        }
    }

    /// Initial range of each non-local output projection. Under `He` the
    /// block output sums four unit-scale paths, so it starts at a quarter.
    pub fn nonlocal_out_gain(self) -> f64 {
        match self {
            InitScheme::He => 0.25,
            InitScheme::Uniform => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width of each side output `S¹..S⁶`.
    pub widths: [usize; STAGES],
    pub in_channels: usize,
    pub backbone_convs: usize,
    pub decoder_convs: usize,
    pub nlgm: bool,
    pub ffg: bool,
    pub erm: bool,
    pub arch: NlgmArch,
    pub nonlocal: NonLocalConfig,
    /// Channel-attention bottleneck ratio.
    pub reduction: usize,
    pub loss_norm: LossNorm,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64, 64, 64],
            in_channels: 3,
            backbone_convs: 2,
            decoder_convs: 3,
            nlgm: true,
            ffg: true,
            erm: true,
            arch: NlgmArch::PerStage,
            nonlocal: NonLocalConfig::default(),
            reduction: 4,
            loss_norm: LossNorm::Mean,
            init: InitScheme::He,
        }
    }
}

impl ModelConfig {
    /// Minimal widths for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            widths: [2, 3, 3, 3, 3, 3],
            ..Self::default()
        }
    }

    pub fn width(&self, stage: usize) -> usize {
        self.widths[stage - 1]
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(invalid("channel widths must be ≥ 1"));
        }
        if self.backbone_convs == 0 || self.decoder_convs == 0 {
            return Err(invalid("conv counts per stage must be ≥ 1"));
        }
        if self.reduction == 0 {
            return Err(invalid("channel-attention reduction must be ≥ 1"));
        }
        Ok(())
    }
}

/// Unification convs and optional attention for one fused stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionStage {
    pub nonlocal: Option<Conv>,
    pub deeper: Conv,
    pub edge: Option<Conv>,
    pub attention: Option<ChannelAttention>,
}

/// Architecture plus its learnable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub backbone: Vec<Vec<Conv>>,
    pub nlgm: Option<NlgmParams>,
    pub erm: Option<ErmParams>,
    /// `stages[i]` fuses decoder stage `i + 1`.
    pub stages: Vec<FusionStage>,
    /// `decoder[i]` produces `Fⁱ⁺¹`.
    pub decoder: Vec<Vec<Conv>>,
    pub side_heads: Vec<Conv>,
    /// `fin_proj[i]` maps `Fⁱ⁺²` to the width of `F¹`.
    pub fin_proj: Vec<Conv>,
    pub final_head: Conv,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let mut params = ParamSet::new();
        let p = &mut params;
        let w = |s: usize| config.width(s);
        let gain = config.init.relu_gain();

        let mut backbone = Vec::with_capacity(STAGES);
        for s in 1..=STAGES {
            let c_in = if s == 1 { config.in_channels } else { w(s - 1) };
            let convs = (1..=config.backbone_convs)
                .map(|j| {
                    let cin = if j == 1 { c_in } else { w(s) };
                    Conv::with_gain(
                        p,
                        &init,
                        &format!("backbone.s{s}.conv{j}"),
                        cin,
                        w(s),
                        3,
                        gain,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            backbone.push(convs);
        }

        let nl_width = w(config.arch.source_stage());
        let nlgm = if config.nlgm {
            Some(NlgmParams::configured(
                p,
                &init,
                nl_width,
                config.arch.block_count(),
                config.nonlocal.axis,
                config.init.nonlocal_out_gain(),
            )?)
        } else {
            None
        };
        let erm = if config.erm {
            Some(ErmParams::new(p, &init, w(2), w(5), FUSED_STAGES, gain)?)
        } else {
            None
        };

        let mut stages = Vec::with_capacity(FUSED_STAGES);
        for s in 1..=FUSED_STAGES {
            let name = |part: &str| format!("ffg.s{s}.{part}");
            let nonlocal = match config.nlgm {
                true => Some(Conv::with_gain(
                    p,
                    &init,
                    &name("unify_n"),
                    nl_width,
                    w(s),
                    1,
                    gain,
                )?),
                false => None,
            };
            let deeper = Conv::with_gain(p, &init, &name("unify_f"), w(s + 1), w(s), 1, gain)?;
            let edge = match config.erm {
                true => Some(Conv::with_gain(
                    p,
                    &init,
                    &name("unify_e"),
                    w(2),
                    w(s),
                    1,
                    gain,
                )?),
                false => None,
            };
            let attention = match config.ffg {
                true => Some(ChannelAttention::new(
                    p,
                    &init,
                    &name("ca"),
                    3 * w(s),
                    config.reduction,
                )?),
                false => None,
            };
            stages.push(FusionStage {
                nonlocal,
                deeper,
                edge,
                attention,
            });
        }

        let mut decoder = Vec::with_capacity(STAGES);
        let mut side_heads = Vec::with_capacity(STAGES);
        for s in 1..=STAGES {
            let c_in = if s == STAGES {
                w(s)
            } else if config.ffg {
                3 * w(s)
            } else {
                w(s)
            };
            let convs = (1..=config.decoder_convs)
                .map(|j| {
                    let cin = if j == 1 { c_in } else { w(s) };
                    Conv::with_gain(
                        p,
                        &init,
                        &format!("decoder.s{s}.conv{j}"),
                        cin,
                        w(s),
                        3,
                        gain,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            decoder.push(convs);
            side_heads.push(Conv::new(
                p,
                &init,
                &format!("decoder.s{s}.head"),
                w(s),
                1,
                1,
            )?);
        }
        let fin_proj = (2..=STAGES)
            .map(|s| Conv::new(p, &init, &format!("fin.proj{s}"), w(s), w(1), 1))
            .collect::<Result<Vec<_>>>()?;
        let final_head = Conv::new(p, &init, "fin.head", w(1), 1, 1)?;

        Ok(Self {
            config,
            params,
            backbone,
            nlgm,
            erm,
            stages,
            decoder,
            side_heads,
            fin_proj,
            final_head,
        })
    }

    /// Builds the architecture for `config` and loads `params` into it.
    pub fn with_params(config: ModelConfig, params: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }
}

/// Checks that five 2×2 poolings never meet an odd extent above one:
/// extents must be multiples of 32 or powers of two below 32.
pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    let ok = |n: usize| n > 0 && (n % MAX_STRIDE == 0 || (n < MAX_STRIDE && n.is_power_of_two()));
    if ok(height) && ok(width) {
        Ok(())
    } else {
        Err(invalid(format!(
            "input is {height}×{width}; each extent must be a multiple of {MAX_STRIDE} \
             (or a power of two below {MAX_STRIDE})"
        )))
    }
}

/// Side outputs `[S¹, …, S⁶]`.
pub fn backbone_forward(g: &mut Graph, model: &Model, image: Var) -> Result<Vec<Var>> {
    let (c, h, w) = g.tape.value(image).chw()?;
    if c != model.config.in_channels {
        return Err(invalid(format!(
            "image has {c} channels, model expects {}",
            model.config.in_channels
        )));
    }
    check_input_size(h, w)?;
    let mut out = Vec::with_capacity(STAGES);
    let mut x = image;
    for (i, convs) in model.backbone.iter().enumerate() {
        if i > 0 {
            x = g.tape.maxpool2d(x)?;
        }
        for conv in convs {
            x = conv.forward_relu(g, x)?;
        }
        g.tape.set_label(x, format!("S{}", i + 1));
        out.push(x);
    }
    Ok(out)
}

/// Branch activations recorded at one fused stage.
#[derive(Clone, Copy, Debug)]
pub struct StageProbe {
    /// `N̂ⁱ ⊗ Êⁱ` (or `N̂ⁱ` without edges); an explicit zero map when the
    /// non-local module is disabled.
    pub nonlocal_branch: Var,
    /// `F̂ⁱ⁺¹ ⊗ Êⁱ` (or `F̂ⁱ⁺¹` without edges).
    pub deeper_branch: Var,
    /// Decoder block input.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Non-local features per fused stage (`[N¹..N⁵]`), empty when disabled.
    pub nonlocal: Vec<Var>,
    /// `[E¹..E⁵]`, empty when edges are disabled.
    pub edges: Vec<Var>,
    /// `[F¹..F⁶]`
    pub features: Vec<Var>,
    /// `[D_F¹(F¹) .. D_F⁶(F⁶)]`, each at its stage resolution.
    pub side_logits: Vec<Var>,
    /// `probes[i]` belongs to stage `i + 1`.
    pub probes: Vec<StageProbe>,
}

fn run_block(g: &mut Graph, convs: &[Conv], mut x: Var) -> Result<Var> {
    for conv in convs {
        x = conv.forward_relu(g, x)?;
    }
    Ok(x)
}

/// Top-down pathway over the side outputs, including the non-local and
/// edge modules it consumes.
pub fn decode(g: &mut Graph, model: &Model, pyramid: &[Var]) -> Result<Decoded> {
    if pyramid.len() != STAGES {
        return Err(invalid(format!(
            "expected {STAGES} side outputs, got {}",
            pyramid.len()
        )));
    }
    let cfg = &model.config;

    let nonlocal = match &model.nlgm {
        Some(p) => {
            let source = pyramid[cfg.arch.source_stage() - 1];
            let chain = nlgm_forward(g, source, p, cfg.nonlocal)?;
            if cfg.arch.shared() {
                // chain[0] is the last block applied
                alloc::vec![chain[0]; FUSED_STAGES]
            } else {
                chain
            }
        }
        None => Vec::new(),
    };
    let edges = match &model.erm {
        Some(p) => erm_forward(g, pyramid[1], pyramid[4], p)?,
        None => Vec::new(),
    };

    let mut features = alloc::vec![pyramid[0]; STAGES];
    let mut probes = Vec::with_capacity(FUSED_STAGES);
    let top = run_block(g, &model.decoder[STAGES - 1], pyramid[STAGES - 1])?;
    g.tape.set_label(top, "F6");
    features[STAGES - 1] = top;

    for s in (1..=FUSED_STAGES).rev() {
        let stage = &model.stages[s - 1];
        let side = pyramid[s - 1];
        let (c, h, w) = g.tape.value(side).chw()?;
        let deeper = unify(g, features[s], (h, w), &stage.deeper)?;
        let edge = match (&stage.edge, edges.get(s - 1)) {
            (Some(theta), Some(&e)) => Some(unify(g, e, (h, w), theta)?),
            _ => None,
        };
        let gated_f = match edge {
            Some(e) => g.tape.mul(deeper, e)?,
            None => deeper,
        };
        let gated_n = match (&stage.nonlocal, nonlocal.get(s - 1)) {
            (Some(theta), Some(&n)) => {
                let n_hat = unify(g, n, (h, w), theta)?;
                Some(match edge {
                    Some(e) => g.tape.mul(n_hat, e)?,
                    None => n_hat,
                })
            }
            _ => None,
        };
        let nonlocal_branch = match gated_n {
            Some(v) => v,
            None => g.tape.constant(Tensor::zeros(&[c, h, w])),
        };
        let fused = match &stage.attention {
            Some(ca) => {
                let cat = g.tape.concat(&[side, nonlocal_branch, gated_f])?;
                channel_attention(g, cat, ca)?
            }
            None => {
                let mut acc = g.tape.add(side, gated_f)?;
                if let Some(n) = gated_n {
                    acc = g.tape.add(acc, n)?;
                }
                acc
            }
        };
        g.tape.set_label(fused, format!("fusion{s}"));
        probes.push(StageProbe {
            nonlocal_branch,
            deeper_branch: gated_f,
            fused,
        });
        let f = run_block(g, &model.decoder[s - 1], fused)?;
        g.tape.set_label(f, format!("F{s}"));
        features[s - 1] = f;
    }
    probes.reverse();

    let side_logits = features
        .iter()
        .zip(&model.side_heads)
        .map(|(&f, head)| head.forward(g, f))
        .collect::<Result<Vec<_>>>()?;

    Ok(Decoded {
        nonlocal,
        edges,
        features,
        side_logits,
        probes,
    })
}

/// `D_P(F¹ + Σᵢ up(projᵢ(Fⁱ)))`, logits at `F¹`'s resolution.
pub fn final_logits(g: &mut Graph, model: &Model, features: &[Var]) -> Result<Var> {
    let (_, h, w) = g.tape.value(features[0]).chw()?;
    let mut fin = features[0];
    for (f, proj) in features[1..].iter().zip(&model.fin_proj) {
        let p = proj.forward(g, *f)?;
        let p = g.tape.upsample_bilinear(p, (h, w))?;
        fin = g.tape.add(fin, p)?;
    }
    g.tape.set_label(fin, "F_fin");
    model.final_head.forward(g, fin)
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub image: Var,
    pub pyramid: Vec<Var>,
    pub decoded: Decoded,
    pub final_logits: Var,
}

pub fn forward(g: &mut Graph, model: &Model, image: &Tensor) -> Result<ForwardPass> {
    let image = g.tape.constant(image.clone());
    g.tape.set_label(image, "image");
    let pyramid = backbone_forward(g, model, image)?;
    let decoded = decode(g, model, &pyramid)?;
    let final_logits = final_logits(g, model, &decoded.features)?;
    Ok(ForwardPass {
        image,
        pyramid,
        decoded,
        final_logits,
    })
}

/// Final saliency prediction at the input resolution.
pub fn infer(model: &Model, image: &Tensor) -> Result<SaliencyMap> {
    let mut g = Graph::new(&model.params, false);
    let pass = forward(&mut g, model, image)?;
    let (_, h, w) = image.chw()?;
    let up = g.tape.upsample_bilinear(pass.final_logits, (h, w))?;
    let prob = g.tape.sigmoid(up);
    SaliencyMap::from_tensor(g.tape.value(prob))
}

/// Named loss terms and their sum.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub terms: Vec<(String, Var)>,
    pub total: Var,
}

/// Side, edge and final cross-entropy terms for one sample. `gt_mask` and
/// `gt_edge` are binary `[1, H, W]` tensors at the image resolution.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    image: &Tensor,
    gt_mask: &Tensor,
    gt_edge: &Tensor,
) -> Result<(ForwardPass, LossTerms)> {
    let pass = forward(g, model, image)?;
    let norm = model.config.loss_norm;
    let mut terms = Vec::new();
    for (i, &logits) in pass.decoded.side_logits.iter().enumerate() {
        terms.push((
            format!("side{}", i + 1),
            saliency_loss(g, logits, gt_mask, norm)?,
        ));
    }
    if let Some(erm) = &model.erm {
        for (i, (&e, head)) in pass.decoded.edges.iter().zip(&erm.heads).enumerate() {
            terms.push((
                format!("edge{}", i + 1),
                edge_loss(g, e, head, gt_edge, norm)?,
            ));
        }
    }
    terms.push((
        "final".into(),
        saliency_loss(g, pass.final_logits, gt_mask, norm)?,
    ));
    let mut total = terms[0].1;
    for &(_, t) in &terms[1..] {
        total = g.tape.add(total, t)?;
    }
    g.tape.set_label(total, "total_loss");
    Ok((pass, LossTerms { terms, total }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn input_size_rule() {
        assert!(check_input_size(64, 96).is_ok());
        assert!(check_input_size(16, 8).is_ok());
        assert!(check_input_size(1, 1).is_ok());
        let err = check_input_size(48, 64).unwrap_err();
        assert!(format!("{err}").contains("multiple of 32"));
        assert!(check_input_size(0, 32).is_err());
        assert!(check_input_size(64, 40).is_err());
    }

    #[test]
    fn pyramid_strides_on_64() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let mut g = Graph::new(&model.params, false);
        let img = g.tape.constant(random_image(3, 64, 64, 2));
        let s = backbone_forward(&mut g, &model, img).unwrap();
        let sizes: Vec<usize> = s.iter().map(|&v| g.tape.shape(v)[1]).collect();
        assert_eq!(sizes, [64, 32, 16, 8, 4, 2]);
        for (i, &v) in s.iter().enumerate() {
            assert_eq!(g.tape.shape(v)[0], model.config.widths[i]);
        }
    }

    #[test]
    fn zero_image_and_zero_biases_give_zero_pyramid() {
        let model = Model::new(ModelConfig::tiny(), 3).unwrap();
        let mut g = Graph::new(&model.params, false);
        let img = g.tape.constant(Tensor::zeros(&[3, 32, 32]));
        for s in backbone_forward(&mut g, &model, img).unwrap() {
            assert!(g.tape.value(s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let model = Model::new(ModelConfig::tiny(), 4).unwrap();
        let err = infer(&model, &random_image(3, 48, 64, 5)).unwrap_err();
        assert!(format!("{err}").contains("multiple of 32"));
    }

    #[test]
    fn decoder_shape_contract() {
        let model = Model::new(ModelConfig::tiny(), 6).unwrap();
        let mut g = Graph::new(&model.params, false);
        let pass = forward(&mut g, &model, &random_image(3, 32, 32, 7)).unwrap();
        let d = &pass.decoded;
        assert_eq!(d.features.len(), 6);
        assert_eq!(d.side_logits.len(), 6);
        assert_eq!(d.probes.len(), 5);
        for (i, (&f, &l)) in d.features.iter().zip(&d.side_logits).enumerate() {
            let s = g.tape.shape(pass.pyramid[i]).to_vec();
            assert_eq!(g.tape.shape(f), &s[..]);
            assert_eq!(g.tape.shape(l), &[1, s[1], s[2]]);
        }
        for (i, p) in d.probes.iter().enumerate() {
            let c = model.config.widths[i];
            assert_eq!(g.tape.shape(p.fused)[0], 3 * c);
        }
    }

    #[test]
    fn zeroed_parameters_give_bias_constant_logits() {
        let mut model = Model::new(ModelConfig::tiny(), 8).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let shape = model.params.get(id).shape().to_vec();
            let fill = if model.params.name(id).ends_with("head.bias") {
                0.25
            } else {
                0.0
            };
            model
                .params
                .replace(id, Tensor::full(&shape, fill))
                .unwrap();
        }
        let mut g = Graph::new(&model.params, false);
        let pass = forward(&mut g, &model, &random_image(3, 32, 32, 9)).unwrap();
        for &l in &pass.decoded.side_logits {
            assert!(g.tape.value(l).data().iter().all(|&v| v == 0.25));
        }
        let pred = infer(&model, &random_image(3, 32, 32, 9)).unwrap();
        let want = crate::tape::sigmoid(0.25);
        assert!(pred.data.iter().all(|&v| v == want));
    }

    #[test]
    fn predictions_lie_strictly_inside_unit_interval() {
        let model = Model::new(ModelConfig::tiny(), 10).unwrap();
        let pred = infer(&model, &random_image(3, 32, 32, 11)).unwrap();
        assert_eq!((pred.width, pred.height), (32, 32));
        assert!(pred.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn total_loss_is_sum_of_twelve_terms() {
        let model = Model::new(ModelConfig::tiny(), 12).unwrap();
        let img = random_image(3, 32, 32, 13);
        let mask = Tensor::from_fn(&[1, 32, 32], |i| {
            ((i / 32) > 12 && (i % 32) < 20) as u8 as f64
        });
        let edge = Tensor::from_fn(&[1, 32, 32], |i| (i % 7 == 0) as u8 as f64);
        let mut g = Graph::new(&model.params, false);
        let (_, terms) = total_loss(&mut g, &model, &img, &mask, &edge).unwrap();
        assert_eq!(terms.terms.len(), 12);
        let total = g.tape.value(terms.total).item().unwrap();
        let mut sum = 0.0;
        for (_, t) in &terms.terms {
            let v = g.tape.value(*t).item().unwrap();
            assert!(v >= 0.0);
            sum += v;
        }
        assert_eq!(total, sum);
    }

    #[test]
    fn disabled_nonlocal_branch_is_identically_zero() {
        let cfg = ModelConfig {
            nlgm: false,
            ..ModelConfig::tiny()
        };
        let model = Model::new(cfg, 14).unwrap();
        assert!(model.nlgm.is_none());
        let mut g = Graph::new(&model.params, false);
        let pass = forward(&mut g, &model, &random_image(3, 32, 32, 15)).unwrap();
        for (i, p) in pass.decoded.probes.iter().enumerate() {
            assert!(g
                .tape
                .value(p.nonlocal_branch)
                .data()
                .iter()
                .all(|&v| v == 0.0));
            let c = model.config.widths[i];
            let fused = g.tape.value(p.fused);
            let plane = fused.shape()[1] * fused.shape()[2];
            assert!(fused.data()[c * plane..2 * c * plane]
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn every_variant_builds_and_runs() {
        for nlgm in [false, true] {
            for ffg in [false, true] {
                for erm in [false, true] {
                    for arch in ['a', 'b', 'c', 'd'] {
                        let cfg = ModelConfig {
                            nlgm,
                            ffg,
                            erm,
                            arch: NlgmArch::from_letter(arch).unwrap(),
                            ..ModelConfig::tiny()
                        };
                        let model = Model::new(cfg, 16).unwrap();
                        let pred = infer(&model, &random_image(3, 32, 32, 17)).unwrap();
                        assert!(pred.data.iter().all(|v| v.is_finite()));
                    }
                }
            }
        }
    }
}

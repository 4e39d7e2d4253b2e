//! Central finite-difference checks for every differentiable op and for
//! the full training loss.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{channel_attention, ChannelAttention, LossNorm};
use crate::model::{total_loss, Model, ModelConfig};
use crate::nlgm::{
    channel_nonlocal, dsnlb, spatial_nonlocal, DsnlbParams, NonLocalConfig, SimilarityAxis,
};
use crate::params::{Graph, Init, ParamSet};
use crate::tape::{sigmoid, Padding, Tape, Var, PROB_EPS};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
pub const FLOOR: f64 = 1e-8;
/// Fallback steps, tried in order when a ± evaluation lands on a different
/// side of a ReLU, max-pool or clamp than the base point.
pub const FALLBACK_STEPS: [f64; 3] = [1e-6, 1e-7, 1e-8];

/// `|a − b| / max(|a|, |b|, floor)`
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Largest mismatch found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    /// Input index (or parameter name for model checks).
    pub input: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    /// Elements whose default step crossed a non-smooth point and were
    /// measured with a smaller one.
    pub reduced_step: usize,
    /// Elements where every step crossed a non-smooth point.
    pub unresolved: usize,
    pub worst: Option<Worst>,
}

impl CheckResult {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error() < TOLERANCE
    }
}

fn note(worst: &mut Option<Worst>, input: String, element: usize, analytic: f64, numeric: f64) {
    let e = rel_error(analytic, numeric);
    if worst.as_ref().is_none_or(|w| e > w.rel_error || e.is_nan()) {
        *worst = Some(Worst {
            input,
            element,
            analytic,
            numeric,
            rel_error: e,
        });
    }
}

/// Outcome of one central difference.
struct Central {
    value: f64,
    reduced: bool,
    resolved: bool,
}

/// `(f(x+h) − f(x−h)) / 2h`, where `eval(δ)` evaluates at `x + δ` and
/// returns its result with the tape's kink fingerprint. Steps that move
/// either side off the base point's smooth piece are retried smaller.
fn central<E>(
    base: u64,
    mut eval: impl FnMut(f64) -> Result<(E, u64)>,
    diff: impl Fn(&E, &E) -> f64,
) -> Result<Central> {
    let mut last = 0.0;
    for (k, h) in core::iter::once(STEP).chain(FALLBACK_STEPS).enumerate() {
        let (plus, fp) = eval(h)?;
        let (minus, fm) = eval(-h)?;
        last = diff(&plus, &minus) / (2.0 * h);
        if fp == base && fm == base {
            return Ok(Central {
                value: last,
                reduced: k > 0,
                resolved: true,
            });
        }
    }
    Ok(Central {
        value: last,
        reduced: true,
        resolved: false,
    })
}

/// Builds an op's output from leaf inputs.
pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Compares tape gradients of `⟨f(inputs), R⟩` (with a fixed random `R`)
/// against central differences in every input element.
pub fn check_op(name: &str, seed: u64, inputs: &[Tensor], f: &OpFn) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // (tape, leaves, output, loss)
    let eval =
        |vals: &[Tensor], proj: &Tensor, grads: bool| -> Result<(Tape, Vec<Var>, Var, Var)> {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = vals
                .iter()
                .map(|t| {
                    if grads {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let out = f(&mut tape, &leaves)?;
            let r = tape.constant(proj.clone());
            let prod = tape.mul(out, r)?;
            let loss = tape.sum(prod);
            Ok((tape, leaves, out, loss))
        };
    let out_shape = {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        tape.shape(out).to_vec()
    };
    let proj = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));

    let (tape, leaves, _, loss) = eval(inputs, &proj, true)?;
    let base = tape.kink_fingerprint();
    let grads = tape.backward(loss)?;
    let mut result = CheckResult {
        name: name.into(),
        seed,
        checked: 0,
        reduced_step: 0,
        unresolved: 0,
        worst: None,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(leaves[k]);
        for i in 0..input.len() {
            let c = central(
                base,
                |delta| {
                    let mut vals = inputs.to_vec();
                    let mut d = input.data().to_vec();
                    d[i] += delta;
                    vals[k] = Tensor::new(input.shape(), d)?;
                    let (tape, _, out, _) = eval(&vals, &proj, false)?;
                    Ok((tape.value(out).data().to_vec(), tape.kink_fingerprint()))
                },
                // ⟨y⁺ − y⁻, R⟩ rather than ⟨y⁺, R⟩ − ⟨y⁻, R⟩: the per-element
                // differences are exact, so only the outputs' own rounding remains
                |plus, minus| {
                    plus.iter()
                        .zip(minus)
                        .zip(proj.data())
                        .map(|((p, m), r)| (p - m) * r)
                        .sum()
                },
            )?;
            result.record(alloc::format!("input{k}"), i, analytic.data()[i], &c);
        }
    }
    Ok(result)
}

impl CheckResult {
    fn record(&mut self, input: String, element: usize, analytic: f64, c: &Central) {
        note(&mut self.worst, input, element, analytic, c.value);
        self.checked += 1;
        self.reduced_step += usize::from(c.reduced && c.resolved);
        self.unresolved += usize::from(!c.resolved);
    }
}

/// A registered op: a name, input generator and forward builder.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: fn() -> OpFn,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn pos_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn nl_params(channels: usize) -> (ParamSet, DsnlbParams) {
    let mut ps = ParamSet::new();
    let p = DsnlbParams::new(&mut ps, &Init::new(3), "b", channels).expect("fresh set");
    (ps, p)
}

/// Runs `f` on a graph whose parameters are the trailing leaves.
fn with_params(
    ps: &ParamSet,
    tape: &mut Tape,
    leaves: &[Var],
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let mut g = Graph::bind(core::mem::take(tape), leaves[1..1 + ps.len()].to_vec());
    let out = f(&mut g, leaves[0]);
    *tape = g.tape;
    out
}

fn nl_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (ps, _) = nl_params(2);
    let mut v = alloc::vec![rand_t(rng, &[2, 2, 3])];
    v.extend(ps.iter().map(|(_, t)| rand_t(rng, t.shape())));
    v
}

fn ca_params() -> (ParamSet, ChannelAttention) {
    let mut ps = ParamSet::new();
    let p = ChannelAttention::new(&mut ps, &Init::new(4), "ca", 6, 4).expect("fresh set");
    (ps, p)
}

/// Every differentiable op the model uses.
pub fn registry() -> Vec<OpCase> {
    alloc::vec![
        OpCase {
            name: "matmul",
            inputs: |r| alloc::vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
            build: || Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        OpCase {
            name: "transpose",
            inputs: |r| alloc::vec![rand_t(r, &[3, 4])],
            build: || Box::new(|t, v| t.transpose(v[0])),
        },
        OpCase {
            name: "reshape",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3, 2])],
            build: || Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        },
        OpCase {
            name: "softmax_rows",
            inputs: |r| alloc::vec![rand_t(r, &[3, 5])],
            build: || Box::new(|t, v| t.softmax(v[0], 1)),
        },
        OpCase {
            name: "softmax_cols",
            inputs: |r| alloc::vec![rand_t(r, &[3, 5])],
            build: || Box::new(|t, v| t.softmax(v[0], 0)),
        },
        OpCase {
            name: "conv2d_3x3_same",
            inputs: |r| alloc::vec![
                rand_t(r, &[2, 5, 5]),
                rand_t(r, &[3, 2, 3, 3]),
                rand_t(r, &[3])
            ],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)),
        },
        OpCase {
            name: "conv2d_3x3_valid_stride2",
            inputs: |r| alloc::vec![
                rand_t(r, &[2, 7, 6]),
                rand_t(r, &[2, 2, 3, 3]),
                rand_t(r, &[2])
            ],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Valid)),
        },
        OpCase {
            name: "conv2d_1x1",
            inputs: |r| alloc::vec![rand_t(r, &[3, 3, 4]), rand_t(r, &[2, 3, 1, 1])],
            build: || Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, Padding::Same)),
        },
        OpCase {
            name: "maxpool2d",
            inputs: |r| alloc::vec![rand_t(r, &[2, 4, 6])],
            build: || Box::new(|t, v| t.maxpool2d(v[0])),
        },
        OpCase {
            name: "upsample_bilinear_up",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3, 2])],
            build: || Box::new(|t, v| t.upsample_bilinear(v[0], (5, 7))),
        },
        OpCase {
            name: "upsample_bilinear_down",
            inputs: |r| alloc::vec![rand_t(r, &[1, 6, 5])],
            build: || Box::new(|t, v| t.upsample_bilinear(v[0], (3, 2))),
        },
        OpCase {
            name: "global_avg_pool",
            inputs: |r| alloc::vec![rand_t(r, &[3, 3, 4])],
            build: || Box::new(|t, v| t.global_avg_pool(v[0])),
        },
        OpCase {
            name: "fully_connected",
            inputs: |r| alloc::vec![rand_t(r, &[4]), rand_t(r, &[3, 4]), rand_t(r, &[3])],
            build: || Box::new(|t, v| t.fully_connected(v[0], v[1], Some(v[2]))),
        },
        OpCase {
            name: "relu",
            inputs: |r| alloc::vec![rand_t(r, &[10])],
            build: || Box::new(|t, v| Ok(t.relu(v[0]))),
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| alloc::vec![rand_t(r, &[10])],
            build: || Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        },
        OpCase {
            name: "add",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])],
            build: || Box::new(|t, v| t.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])],
            build: || Box::new(|t, v| t.sub(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])],
            build: || Box::new(|t, v| t.mul(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            inputs: |r| alloc::vec![rand_t(r, &[5])],
            build: || Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
        },
        OpCase {
            name: "channel_scale",
            inputs: |r| alloc::vec![rand_t(r, &[3, 2, 2]), rand_t(r, &[3])],
            build: || Box::new(|t, v| t.channel_scale(v[0], v[1])),
        },
        OpCase {
            name: "concat",
            inputs: |r| alloc::vec![rand_t(r, &[1, 2, 3]), rand_t(r, &[2, 2, 3])],
            build: || Box::new(|t, v| t.concat(&[v[0], v[1]])),
        },
        OpCase {
            name: "sum",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3])],
            build: || Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        OpCase {
            name: "mean",
            inputs: |r| alloc::vec![rand_t(r, &[2, 3])],
            build: || Box::new(|t, v| Ok(t.mean(v[0]))),
        },
        OpCase {
            name: "bce_with_logits",
            inputs: |r| alloc::vec![Tensor::from_fn(&[1, 3, 3], |_| r.gen_range(-3.0..3.0))],
            build: || {
                Box::new(|t, v| {
                    // targets and weights are data, not graph inputs
                    let mut r = ChaCha8Rng::seed_from_u64(17);
                    let y = Tensor::from_fn(&[1, 3, 3], |_| f64::from(r.gen_range(0..2u8)));
                    let w = pos_t(&mut r, &[1, 3, 3]);
                    t.bce_with_logits(v[0], &y, &w)
                })
            },
        },
        OpCase {
            name: "spatial_nonlocal",
            inputs: nl_inputs,
            build: || {
                Box::new(|t, v| {
                    let (ps, p) = nl_params(2);
                    with_params(&ps, t, v, |g, a| {
                        spatial_nonlocal(g, a, &p, SimilarityAxis::Key)
                    })
                })
            },
        },
        OpCase {
            name: "channel_nonlocal",
            inputs: |r| alloc::vec![rand_t(r, &[3, 2, 2])],
            build: || Box::new(|t, v| channel_nonlocal(t, v[0], SimilarityAxis::Key)),
        },
        OpCase {
            name: "dsnlb",
            inputs: nl_inputs,
            build: || {
                Box::new(|t, v| {
                    let (ps, p) = nl_params(2);
                    with_params(&ps, t, v, |g, a| dsnlb(g, a, &p, NonLocalConfig::default()))
                })
            },
        },
        OpCase {
            name: "channel_attention",
            inputs: |r| {
                let (ps, _) = ca_params();
                let mut v = alloc::vec![rand_t(r, &[6, 2, 2])];
                v.extend(ps.iter().map(|(_, t)| rand_t(r, t.shape())));
                v
            },
            build: || {
                Box::new(|t, v| {
                    let (ps, p) = ca_params();
                    with_params(&ps, t, v, |g, x| channel_attention(g, x, &p))
                })
            },
        },
    ]
}

/// Runs one registered case.
pub fn run_case(case: &OpCase, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.inputs)(&mut rng);
    check_op(case.name, seed, &inputs, &(case.build)())
}

/// Square with a deliberately wrong backward rule (`g·x` instead of
/// `2·g·x`); the check must reject it.
pub fn corrupted_square() -> OpCase {
    OpCase {
        name: "corrupted_square",
        inputs: |r| alloc::vec![rand_t(r, &[6])],
        build: || {
            Box::new(|t, v| {
                let x = t.value(v[0]).clone();
                let y = x.map(|a| a * a);
                Ok(t.custom(
                    "corrupted_square",
                    &[v[0]],
                    y,
                    Box::new(|ins, _, g| {
                        alloc::vec![ins[0].data().iter().zip(g).map(|(a, g)| a * g).collect()]
                    }),
                ))
            })
        },
    }
}

/// Sample used by the end-to-end check: random image, blocky mask and its
/// edges.
pub fn model_fixture(size: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = pos_t(&mut rng, &[3, size, size]);
    let (x0, y0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
    let mask = Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        (x >= x0 && x < x0 + size / 2 && y >= y0 && y < y0 + size / 2) as u8 as f64
    });
    let edge = Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as isize, (i % size) as isize);
        let inside = |x: isize, y: isize| {
            let (x, y) = (
                x.clamp(0, size as isize - 1) as usize,
                y.clamp(0, size as isize - 1) as usize,
            );
            mask.data()[y * size + x] > 0.5
        };
        let c = inside(x, y);
        let differs = (-1..=1).any(|dy| (-1..=1).any(|dx| inside(x + dx, y + dy) != c));
        differs as u8 as f64
    });
    (image, mask, edge)
}

/// `ℓ(a) − ℓ(b)` for one weighted cross-entropy element with logits `a`
/// and `b` on the same side of both probability clamps. Written in terms
/// of `a − b` so that rounding in the sigmoid and logarithm stays out.
fn bce_difference(a: f64, b: f64, y: f64, w: f64) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    let pb = sigmoid(b);
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pb) {
        return 0.0;
    }
    // softplus(a) − softplus(b) = log1p(σ(b)·expm1(a − b))
    let d = a - b;
    w * (libm::log1p(pb * libm::expm1(d)) - y * d)
}

/// Full training loss of `model` on the fixture, every parameter element
/// against central differences. The difference `L(x+h) − L(x−h)` is
/// accumulated element by element over every cross-entropy term rather
/// than as the difference of two rounded totals; low-resolution logits
/// are upsampled to many pixels, so their rounding would otherwise enter
/// the total hundreds of times over.
pub fn check_model(model: &Model, size: usize, seed: u64) -> Result<CheckResult> {
    let (image, mask, edge) = model_fixture(size, seed);
    let scale = |len: usize| match model.config.loss_norm {
        LossNorm::Mean => 1.0 / len as f64,
        LossNorm::Sum => 1.0,
    };
    type Terms = Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>;
    let evaluate = |params: &ParamSet| -> Result<(Terms, u64)> {
        let mut g = Graph::new(params, false);
        total_loss(&mut g, model, &image, &mask, &edge)?;
        let terms = g
            .tape
            .bce_inputs()
            .iter()
            .map(|b| (b.logits.to_vec(), b.target.to_vec(), b.weight.to_vec()))
            .collect();
        Ok((terms, g.tape.kink_fingerprint()))
    };
    let diff = |plus: &Terms, minus: &Terms| -> f64 {
        plus.iter()
            .zip(minus)
            .map(|((zp, y, w), (zm, _, _))| {
                let s: f64 = (0..zp.len())
                    .map(|i| bce_difference(zp[i], zm[i], y[i], w[i]))
                    .sum();
                scale(zp.len()) * s
            })
            .sum()
    };

    let mut g = Graph::new(&model.params, true);
    let (_, terms) = total_loss(&mut g, model, &image, &mask, &edge)?;
    let base = g.tape.kink_fingerprint();
    let grads = g.tape.backward(terms.total)?;
    let analytic = g.param_grads(&grads);

    let mut result = CheckResult {
        name: alloc::format!("total_loss_{size}x{size}"),
        seed,
        checked: 0,
        reduced_step: 0,
        unresolved: 0,
        worst: None,
    };
    let mut params = model.params.clone();
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let orig = params.get(id).clone();
        for i in 0..orig.len() {
            let c = central(
                base,
                |delta| {
                    let mut d = orig.data().to_vec();
                    d[i] += delta;
                    params.replace(id, Tensor::new(orig.shape(), d)?)?;
                    evaluate(&params)
                },
                diff,
            )?;
            result.record(params.name(id).into(), i, analytic[k].data()[i], &c);
        }
        params.replace(id, orig)?;
    }
    Ok(result)
}

/// End-to-end check on a freshly initialized model whose biases are
/// redrawn uniformly in `±0.1`. Zero biases put dead-channel
/// pre-activations exactly on the ReLU kink, where central differences
/// measure a one-sided slope instead of the derivative.
pub fn check_end_to_end(config: &ModelConfig, size: usize, seed: u64) -> Result<CheckResult> {
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with(".bias") {
            let shape = model.params.get(id).shape().to_vec();
            let b = Tensor::from_fn(&shape, |_| rng.gen_range(-0.1..0.1));
            model.params.replace(id, b)?;
        }
    }
    check_model(&model, size, seed)
}

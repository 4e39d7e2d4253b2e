//! Adam training over a sample list with a single step decay.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{total_loss, Model};
use crate::params::{Graph, ParamSet};
use crate::tensor::Tensor;

/// One supervised example: `image: [3, H, W]`, binary `mask` and `edge`
/// of shape `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub edge: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step at which the learning rate is multiplied by `decay_factor`.
    /// `None` means three quarters of the way through.
    pub decay_step: Option<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            decay_step: None,
            decay_factor: 0.1,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn resolved_decay_step(&self) -> usize {
        self.decay_step.unwrap_or(self.steps * 3 / 4)
    }

    /// Learning rate used at zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.resolved_decay_step() {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| alloc::vec![0.0; t.len()])
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one bias-corrected update. `grads` is in parameter order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get(id);
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut out = p.data().to_vec();
            for i in 0..out.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = (m[i] / c1) / (libm::sqrt(v[i] / c2) + self.eps);
                out[i] -= lr * step;
            }
            let shape = p.shape().to_vec();
            params.replace(id, Tensor::new(&shape, out)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<StepRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the first `window` steps.
    pub fn initial_smoothed(&self, window: usize) -> f64 {
        window_mean(&self.losses(), window, false)
    }

    /// Mean loss over the last `window` steps.
    pub fn final_smoothed(&self, window: usize) -> f64 {
        window_mean(&self.losses(), window, true)
    }
}

fn window_mean(xs: &[f64], window: usize, tail: bool) -> f64 {
    let w = window.clamp(1, xs.len().max(1));
    let slice = if tail {
        &xs[xs.len().saturating_sub(w)..]
    } else {
        &xs[..w.min(xs.len())]
    };
    if slice.is_empty() {
        return f64::NAN;
    }
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// Trailing moving average with the given window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &Model, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(&model.params, true);
    let (_, terms) = total_loss(&mut g, model, &sample.image, &sample.mask, &sample.edge)?;
    let loss = g.tape.value(terms.total).item().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        let at = match g.tape.first_non_finite() {
            Some(r) => format!("first non-finite tensor: {r}"),
            None => "no non-finite tensor recorded".into(),
        };
        return Err(Error::NonFinite(format!("loss is {loss}; {at}")));
    }
    let grads = g.tape.backward(terms.total)?;
    let grads = g.param_grads(&grads);
    for (k, (name, _)) in model.params.iter().enumerate() {
        if !grads[k].is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    Ok((loss, grads))
}

/// Runs `cfg.steps` Adam steps over shuffled epochs of `data`. Mini-batch
/// gradients are averaged in sample order. `on_step` sees every record as
/// it is produced.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<History> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = History::default();

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let mut sum: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &data[order[cursor]];
            cursor += 1;
            let (l, grads) = sample_gradients(model, sample).map_err(|e| annotate(e, step))?;
            loss += l;
            sum = Some(match sum {
                None => grads,
                Some(acc) => acc
                    .iter()
                    .zip(&grads)
                    .map(|(a, b)| Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
                    .collect(),
            });
        }
        let n = cfg.batch_size as f64;
        let mut grads = sum.expect("batch size ≥ 1");
        if cfg.batch_size > 1 {
            grads = grads.iter().map(|t| t.map(|v| v / n)).collect();
        }
        adam.step(&mut model.params, &grads, lr)?;
        let record = StepRecord {
            step,
            loss: loss / n,
            lr,
        };
        on_step(&record);
        history.records.push(record);
    }
    Ok(history)
}

fn annotate(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
        other => other,
    }
}

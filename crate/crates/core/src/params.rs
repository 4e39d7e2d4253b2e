//! Named parameter storage, seeded initialization and the two layer
//! primitives (convolution, fully connected) every module is built from.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tape::{Gradients, Padding, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid(alloc::format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Swaps in a new value with the same shape.
    pub fn replace(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(invalid(alloc::format!(
                "parameter `{}` has shape {:?}, replacement has {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Copies values for every name present in `other`; names and shapes
    /// must match exactly.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(invalid(alloc::format!(
                "parameter sets differ: expected {} tensors ({:?}...), got {}",
                self.names.len(),
                self.names.first(),
                other.names.len()
            )));
        }
        for (id, t) in other.tensors.iter().enumerate() {
            self.replace(ParamId(id), t.clone())?;
        }
        Ok(())
    }
}

/// Seeded initializer. Every tensor draws from its own stream derived from
/// the run seed and the tensor name, so two models that share a layer name
/// start from identical values for that layer.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn stream(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, folded with the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        self.scaled(name, shape, fan_in, 1.0)
    }

    /// Uniform in `±gain/√fan_in`.
    pub fn scaled(&self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        let bound = gain / libm::sqrt(fan_in.max(1) as f64);
        let mut rng = self.stream(name);
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }
}

/// A 2-D convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::with_gain(params, init, name, c_in, c_out, kernel, 1.0)
    }

    /// Weights uniform in `±gain/√fan_in`, zero bias.
    pub fn with_gain(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        let wname = alloc::format!("{name}.weight");
        let fan_in = c_in * kernel * kernel;
        let w = init.scaled(&wname, &[c_out, c_in, kernel, kernel], fan_in, gain);
        let weight = params.add(wname, w)?;
        let bias = params.add(alloc::format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            c_in,
            c_out,
            kernel,
            stride: 1,
        })
    }

    /// Like [`Conv::with_gain`] without a bias term.
    pub fn unbiased(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        let wname = alloc::format!("{name}.weight");
        let fan_in = c_in * kernel * kernel;
        let w = init.scaled(&wname, &[c_out, c_in, kernel, kernel], fan_in, gain);
        Ok(Self {
            weight: params.add(wname, w)?,
            bias: None,
            c_in,
            c_out,
            kernel,
            stride: 1,
        })
    }

    /// Same-padded cross-correlation.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.stride, Padding::Same)
    }

    /// `relu(conv(x))`
    pub fn forward_relu(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.tape.relu(y))
    }
}

/// A fully connected layer with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        init: &Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let wname = alloc::format!("{name}.weight");
        let weight = params.add(wname.clone(), init.uniform(&wname, &[d_out, d_in], d_in))?;
        let bias = params.add(alloc::format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.fully_connected(x, w, Some(b))
    }
}

/// A tape with every parameter of a [`ParamSet`] bound as a leaf.
pub struct Graph {
    pub tape: Tape,
    vars: Vec<Var>,
}

impl Graph {
    /// Binds `params` onto a fresh tape. With `trainable` false the
    /// parameters are constants and no gradient bookkeeping happens.
    pub fn new(params: &ParamSet, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                tape.set_label(v, name);
                v
            })
            .collect();
        Self { tape, vars }
    }

    /// Wraps an existing tape whose leaves `vars` stand in for the
    /// parameters, in [`ParamSet`] order.
    pub fn bind(tape: Tape, vars: Vec<Var>) -> Self {
        Self { tape, vars }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in [`ParamSet`] order (zeros where a
    /// parameter did not reach the loss).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zero(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let init = Init::new(7);
        let a = init.uniform("x", &[4], 4);
        let b = init.uniform("x", &[4], 4);
        let c = init.uniform("y", &[4], 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
        assert_ne!(a, Init::new(8).uniform("x", &[4], 4));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn replace_checks_shape() {
        let mut p = ParamSet::new();
        let id = p.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.replace(id, Tensor::zeros(&[3])).is_err());
        p.replace(id, Tensor::ones(&[2])).unwrap();
        assert_eq!(p.get(id).data(), &[1.0, 1.0]);
    }
}

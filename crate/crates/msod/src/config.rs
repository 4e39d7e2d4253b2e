//! `key=value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::Path;

use msod_core::data::DatasetSpec;
use msod_core::fusion::LossNorm;
use msod_core::model::{InitScheme, ModelConfig, NlgmArch, STAGES};
use msod_core::nlgm::{Branches, NonLocalConfig, SimilarityAxis};
use msod_core::train::TrainConfig;

use crate::error::{Error, Result};

/// Every accepted key with a one-line description, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "RNG seed for data, init and shuffling"),
    ("size", "image size, `N` or `WxH`"),
    ("widths", "six comma-separated side-output channel widths"),
    ("steps", "training steps"),
    ("batch_size", "samples per step"),
    ("lr", "initial learning rate"),
    (
        "decay_step",
        "step of the x0.1 decay, or `auto` for 75% of steps",
    ),
    ("loss_norm", "per-term reduction: mean | sum"),
    ("softmax_axis", "similarity softmax axis: key | query"),
    ("nlgm", "non-local guidance module: on | off"),
    ("ffg", "feature fusion gate: on | off"),
    ("erm", "edge refinement module: on | off"),
    ("arch", "non-local architecture: a | b | c | d"),
    ("nonlocal", "non-local blocks: both | ssnlb | csnlb"),
    ("init", "weight init: he | uniform"),
    ("scenes", "scenes written by `gen`"),
    ("min_objects", "fewest objects per generated scene"),
    ("max_objects", "most objects per generated scene"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scenes: 100,
            min_objects: 3,
            max_objects: msod_core::data::MAX_OBJECTS,
        }
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "seed" => self.seed.to_string(),
            "size" if self.width == self.height => self.width.to_string(),
            "size" => format!("{}x{}", self.width, self.height),
            "widths" => m.widths.map(|w| w.to_string()).join(","),
            "steps" => self.train.steps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "lr" => format!("{:e}", self.train.lr),
            "decay_step" => match self.train.decay_step {
                Some(s) => s.to_string(),
                None => "auto".into(),
            },
            "loss_norm" => match m.loss_norm {
                LossNorm::Mean => "mean",
                LossNorm::Sum => "sum",
            }
            .into(),
            "softmax_axis" => match m.nonlocal.axis {
                SimilarityAxis::Key => "key",
                SimilarityAxis::Query => "query",
            }
            .into(),
            "nlgm" => on_off(m.nlgm).into(),
            "ffg" => on_off(m.ffg).into(),
            "erm" => on_off(m.erm).into(),
            "arch" => m.arch.letter().to_string(),
            "nonlocal" => match m.nonlocal.branches {
                Branches::Both => "both",
                Branches::SpatialOnly => "ssnlb",
                Branches::ChannelOnly => "csnlb",
            }
            .into(),
            "init" => match m.init {
                InitScheme::He => "he",
                InitScheme::Uniform => "uniform",
            }
            .into(),
            "scenes" => self.scenes.to_string(),
            "min_objects" => self.min_objects.to_string(),
            "max_objects" => self.max_objects.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        match key {
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.train.seed = self.seed;
            }
            "size" => {
                let (w, h) = match v.split_once('x') {
                    Some((w, h)) => (parse_num(key, w)?, parse_num(key, h)?),
                    None => {
                        let n = parse_num(key, v)?;
                        (n, n)
                    }
                };
                msod_core::model::check_input_size(h, w)?;
                (self.width, self.height) = (w, h);
            }
            "widths" => {
                let ws = v
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                m.widths = ws.try_into().map_err(|ws: Vec<usize>| {
                    Error::Config(format!(
                        "widths: expected {STAGES} values, got {}",
                        ws.len()
                    ))
                })?;
                if m.widths.contains(&0) {
                    return Err(Error::Config("widths: must be ≥ 1".into()));
                }
            }
            "steps" => self.train.steps = parse_num(key, v)?,
            "batch_size" => {
                self.train.batch_size = parse_num(key, v)?;
                if self.train.batch_size == 0 {
                    return Err(Error::Config("batch_size: must be ≥ 1".into()));
                }
            }
            "lr" => {
                self.train.lr = parse_num(key, v)?;
                if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
                    return Err(Error::Config(format!(
                        "lr: must be finite and ≥ 0, got {v}"
                    )));
                }
            }
            "decay_step" => {
                self.train.decay_step = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "loss_norm" => {
                m.loss_norm = match v {
                    "mean" => LossNorm::Mean,
                    "sum" => LossNorm::Sum,
                    _ => {
                        return Err(Error::Config(format!(
                            "loss_norm: expected mean|sum, got `{v}`"
                        )))
                    }
                }
            }
            "softmax_axis" => {
                m.nonlocal.axis = match v {
                    "key" => SimilarityAxis::Key,
                    "query" => SimilarityAxis::Query,
                    _ => {
                        return Err(Error::Config(format!(
                            "softmax_axis: expected key|query, got `{v}`"
                        )))
                    }
                }
            }
            "nlgm" => m.nlgm = parse_bool(key, v)?,
            "ffg" => m.ffg = parse_bool(key, v)?,
            "erm" => m.erm = parse_bool(key, v)?,
            "arch" => {
                let mut chars = v.chars();
                m.arch = match (chars.next(), chars.next()) {
                    (Some(c), None) => NlgmArch::from_letter(c),
                    _ => None,
                }
                .ok_or_else(|| Error::Config(format!("arch: expected a|b|c|d, got `{v}`")))?;
            }
            "nonlocal" => {
                m.nonlocal = NonLocalConfig {
                    branches: match v {
                        "both" => Branches::Both,
                        "ssnlb" => Branches::SpatialOnly,
                        "csnlb" => Branches::ChannelOnly,
                        _ => {
                            return Err(Error::Config(format!(
                                "nonlocal: expected both|ssnlb|csnlb, got `{v}`"
                            )))
                        }
                    },
                    ..m.nonlocal
                }
            }
            "init" => {
                m.init = match v {
                    "he" => InitScheme::He,
                    "uniform" => InitScheme::Uniform,
                    _ => {
                        return Err(Error::Config(format!(
                            "init: expected he|uniform, got `{v}`"
                        )))
                    }
                }
            }
            "scenes" => self.scenes = parse_num(key, v)?,
            "min_objects" => self.min_objects = parse_num(key, v)?,
            "max_objects" => self.max_objects = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies every assignment of a config file. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, strip(&e)))
    }

    /// Fully resolved configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        if self.min_objects > self.max_objects || self.max_objects > msod_core::data::MAX_OBJECTS {
            return Err(Error::Config(format!(
                "object range {}..={} must lie within 0..={}",
                self.min_objects,
                self.max_objects,
                msod_core::data::MAX_OBJECTS
            )));
        }
        Ok(DatasetSpec {
            scenes: self.scenes,
            width: self.width,
            height: self.height,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            seed: self.seed,
        })
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Key listing with defaults for `--help`.
pub fn help_text() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (default):\n");
    for (k, help) in KEYS {
        let _ = writeln!(s, "  {k:<13} {help} ({})", d.get(k).expect("listed key"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        for kv in [
            "size=32x64",
            "widths=1,2,3,4,5,6",
            "arch=b",
            "nonlocal=csnlb",
            "init=uniform",
            "lr=0.5",
            "decay_step=7",
            "nlgm=off",
        ] {
            c.assign(kv).unwrap();
        }
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(
            RunConfig::parse(&RunConfig::default().to_text()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::parse("seed=1\nlearning_rate=3\n").unwrap_err();
        assert!(
            e.to_string()
                .contains("line 2: unknown key `learning_rate`"),
            "{e}"
        );
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        for kv in [
            "size=48",
            "widths=1,2",
            "arch=e",
            "nlgm=maybe",
            "lr=-1",
            "steps=x",
            "noequals",
        ] {
            assert!(c.assign(kv).is_err(), "{kv}");
        }
    }

    #[test]
    fn help_lists_every_key() {
        let h = help_text();
        for (k, _) in KEYS {
            assert!(h.contains(k));
        }
        assert!(h.contains("16,32,64,64,64,64"));
    }
}

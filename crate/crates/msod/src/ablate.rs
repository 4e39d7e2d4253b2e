//! Ablation presets: the component, block-configuration and architecture
//! variant matrices, trained under identical seeds and compared on a test
//! set.

use std::fmt::Write as _;

use msod_core::image::SaliencyMap;
use msod_core::metrics::ImageMetrics;
use msod_core::model::{forward, infer, Model, ModelConfig, NlgmArch};
use msod_core::nlgm::Branches;
use msod_core::params::Graph;
use msod_core::train::{train, History, Sample, TrainConfig};
use msod_core::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Component ablation: NLGM, FFG and ERM toggles.
    Table2,
    /// Spatial-only, channel-only and dual non-local blocks.
    Table3,
    /// Non-local architectures a to d.
    Table4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
}

fn variant(label: &str, base: &ModelConfig, f: impl FnOnce(&mut ModelConfig)) -> Variant {
    let mut model = base.clone();
    f(&mut model);
    Variant {
        label: label.into(),
        model,
    }
}

/// Variant rows in table order. Widths, init and loss settings come from
/// `base`; the toggles a preset varies are overwritten.
pub fn variants(preset: Preset, base: &ModelConfig) -> Vec<Variant> {
    let comp = |nlgm, ffg, erm| {
        move |m: &mut ModelConfig| {
            m.nlgm = nlgm;
            m.ffg = ffg;
            m.erm = erm;
        }
    };
    match preset {
        Preset::Table2 => vec![
            variant("baseline", base, comp(false, false, false)),
            variant("NLGM", base, comp(true, false, false)),
            variant("NLGM+ERM", base, comp(true, false, true)),
            variant("NLGM+FFG", base, comp(true, true, false)),
            variant("NLGM+FFG+ERM", base, comp(true, true, true)),
        ],
        Preset::Table3 => [
            ("SSNLB", Branches::SpatialOnly),
            ("CSNLB", Branches::ChannelOnly),
            ("SSNLB+CSNLB", Branches::Both),
        ]
        .into_iter()
        .map(|(label, b)| {
            variant(label, base, |m| {
                comp(true, false, false)(m);
                m.nonlocal.branches = b;
            })
        })
        .collect(),
        Preset::Table4 => [
            NlgmArch::SingleShared,
            NlgmArch::StackShared,
            NlgmArch::PerStageFromTop,
            NlgmArch::PerStage,
        ]
        .into_iter()
        .map(|a| {
            variant(&format!("({})", a.letter()), base, |m| {
                comp(true, false, false)(m);
                m.arch = a;
            })
        })
        .collect(),
    }
}

/// A held-out image and its binary ground truth.
#[derive(Clone, Debug)]
pub struct TestItem {
    pub name: String,
    pub image: Tensor,
    pub gt: SaliencyMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub max_f: f64,
    pub mae: f64,
    pub s: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// The stage probes agree with the variant's NLGM flag.
    pub probe_ok: bool,
}

/// Window of the smoothed-loss summaries.
pub const LOSS_WINDOW: usize = 20;

/// True when every non-local probe is exactly zero with the module off and
/// at least one is nonzero with it on.
pub fn probe_matches(model: &Model, image: &Tensor) -> Result<bool> {
    let mut g = Graph::new(&model.params, false);
    let fp = forward(&mut g, model, image)?;
    let zero = fp.decoded.probes.iter().all(|p| {
        g.tape
            .value(p.nonlocal_branch)
            .data()
            .iter()
            .all(|&v| v == 0.0)
    });
    Ok(zero != model.config.nlgm)
}

/// Mean per-image metrics of `model` over `test`.
pub fn score(model: &Model, test: &[TestItem]) -> Result<(f64, f64, f64)> {
    let (mut f, mut mae, mut s) = (0.0, 0.0, 0.0);
    for item in test {
        let pred = infer(model, &item.image)?;
        let m = ImageMetrics::compute(item.name.as_str(), &pred, &item.gt)?;
        f += m.max_f;
        mae += m.mae;
        s += m.s;
    }
    let n = test.len().max(1) as f64;
    Ok((f / n, mae / n, s / n))
}

/// Trains `v` with `seed` for initialization and shuffling, then scores it.
pub fn run_variant(
    v: &Variant,
    seed: u64,
    train_cfg: &TrainConfig,
    data: &[Sample],
    test: &[TestItem],
) -> Result<(RunResult, History)> {
    if test.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test set".into()));
    }
    let mut model = Model::new(v.model.clone(), seed)?;
    let probe_ok = probe_matches(&model, &test[0].image)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let history = train(&mut model, data, &cfg, |_| {})?;
    let (max_f, mae, s) = score(&model, test)?;
    Ok((
        RunResult {
            label: v.label.clone(),
            seed,
            max_f,
            mae,
            s,
            initial_loss: history.initial_smoothed(LOSS_WINDOW),
            final_loss: history.final_smoothed(LOSS_WINDOW),
            probe_ok,
        },
        history,
    ))
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => xs[n / 2],
        _ => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

/// Median metrics of one variant across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub label: String,
    pub max_f: f64,
    pub mae: f64,
    pub s: f64,
}

pub fn summarize(variants: &[Variant], results: &[RunResult]) -> Vec<Summary> {
    variants
        .iter()
        .map(|v| {
            let rows: Vec<&RunResult> = results.iter().filter(|r| r.label == v.label).collect();
            let col = |f: fn(&RunResult) -> f64| {
                median(&mut rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            Summary {
                label: v.label.clone(),
                max_f: col(|r| r.max_f),
                mae: col(|r| r.mae),
                s: col(|r| r.s),
            }
        })
        .collect()
}

/// A directional claim between two rows, compared on median maxF.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub better: String,
    pub worse: String,
    pub holds: bool,
}

/// Orderings the table is expected to show: every row against the one it
/// extends.
pub fn directions(preset: Preset, summary: &[Summary]) -> Vec<Direction> {
    let pairs: &[(&str, &str)] = match preset {
        Preset::Table2 => &[
            ("NLGM", "baseline"),
            ("NLGM+FFG+ERM", "baseline"),
            ("NLGM+ERM", "NLGM"),
            ("NLGM+FFG", "NLGM"),
            ("NLGM+FFG+ERM", "NLGM+FFG"),
        ],
        Preset::Table3 => &[("SSNLB+CSNLB", "SSNLB"), ("SSNLB+CSNLB", "CSNLB")],
        Preset::Table4 => &[("(b)", "(a)"), ("(c)", "(b)"), ("(d)", "(c)")],
    };
    let get = |l: &str| summary.iter().find(|s| s.label == l).map(|s| s.max_f);
    pairs
        .iter()
        .filter_map(|&(b, w)| {
            Some(Direction {
                better: b.into(),
                worse: w.into(),
                holds: get(b)? >= get(w)?,
            })
        })
        .collect()
}

pub fn results_table(results: &[RunResult], summary: &[Summary], dirs: &[Direction]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>5} {:>8} {:>8} {:>8} {:>10} {:>10} {:>6}",
        "variant", "seed", "maxF", "MAE", "S", "loss0", "loss_end", "probe"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<14} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>10.4} {:>6}",
            r.label,
            r.seed,
            r.max_f,
            r.mae,
            r.s,
            r.initial_loss,
            r.final_loss,
            if r.probe_ok { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "\nmedians over seeds");
    for m in summary {
        let _ = writeln!(
            s,
            "{:<14} {:>8.4} {:>8.4} {:>8.4}",
            m.label, m.max_f, m.mae, m.s
        );
    }
    if !dirs.is_empty() {
        let _ = writeln!(s, "\nexpected orderings (median maxF)");
        for d in dirs {
            let _ = writeln!(
                s,
                "{:<14} >= {:<14} {}",
                d.better,
                d.worse,
                if d.holds { "holds" } else { "VIOLATED" }
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_table_rows() {
        let base = ModelConfig::default();
        let t2 = variants(Preset::Table2, &base);
        assert_eq!(t2.len(), 5);
        assert!(!t2[0].model.nlgm && !t2[0].model.ffg && !t2[0].model.erm);
        assert!(t2[4].model.nlgm && t2[4].model.ffg && t2[4].model.erm);
        let t3 = variants(Preset::Table3, &base);
        assert!(t3
            .iter()
            .all(|v| v.model.nlgm && !v.model.ffg && !v.model.erm));
        let t4 = variants(Preset::Table4, &base);
        assert_eq!(
            t4.iter().map(|v| v.model.arch.letter()).collect::<String>(),
            "abcd"
        );
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}

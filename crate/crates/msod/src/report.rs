//! Directory evaluation and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use msod_core::image::SaliencyMap;
use msod_core::metrics::{evaluate, MetricsReport, THRESHOLDS};

use crate::error::{Error, Result};
use crate::pnm;

pub const METRICS_CSV: &str = "metrics.csv";
pub const PR_CSV: &str = "pr.csv";
pub const REPORT_TXT: &str = "report.txt";

/// Files with extension `ext` in `dir`, keyed by file name.
pub fn list_files(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Pairs predictions and ground truths by file name. Predictions map
/// `v/255`; ground truths are binarized at 128. Unmatched names on either
/// side are listed in the report and skipped.
pub fn evaluate_dirs(preds: &Path, gts: &Path) -> Result<MetricsReport> {
    let p = list_files(preds, "pgm")?;
    let g = list_files(gts, "pgm")?;
    let mut pairs: Vec<(String, SaliencyMap, SaliencyMap)> = Vec::new();
    let mut unmatched = Vec::new();
    for (name, path) in &p {
        match g.get(name) {
            Some(gt) => {
                let pred = pnm::read_pgm(path)?.to_saliency();
                let gt_map = pnm::read_pgm(gt)?.to_binary();
                if !pred.same_size(&gt_map) {
                    return Err(Error::format(
                        path,
                        format!(
                            "prediction is {}×{}, ground truth {}×{}",
                            pred.width, pred.height, gt_map.width, gt_map.height
                        ),
                    ));
                }
                pairs.push((name.clone(), pred, gt_map));
            }
            None => unmatched.push(path.display().to_string()),
        }
    }
    unmatched.extend(
        g.iter()
            .filter(|(n, _)| !p.contains_key(*n))
            .map(|(_, path)| path.display().to_string()),
    );
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no file names shared by {} and {}",
            preds.display(),
            gts.display()
        )));
    }
    let mut report = evaluate(pairs.iter().map(|(n, p, g)| (n.as_str(), p, g)))?;
    report.unmatched = unmatched;
    Ok(report)
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from("image,maxF,MAE,S\n");
    for m in &report.images {
        let _ = writeln!(s, "{},{},{},{}", m.name, m.max_f, m.mae, m.s);
    }
    s
}

/// Curve from pooled counts.
pub fn pr_csv(report: &MetricsReport) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for t in 0..THRESHOLDS {
        let _ = writeln!(
            s,
            "{t},{},{}",
            report.pooled.precision[t], report.pooled.recall[t]
        );
    }
    s
}

pub fn report_text(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "image", "maxF", "MAE", "S");
    for m in &report.images {
        let flag = if m.empty_gt {
            "  (empty ground truth)"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "{:<24} {:>8.4} {:>8.4} {:>8.4}{flag}",
            m.name, m.max_f, m.mae, m.s
        );
    }
    let _ = writeln!(
        s,
        "{:<24} {:>8.4} {:>8.4} {:>8.4}",
        "mean", report.mean_max_f, report.mean_mae, report.mean_s
    );
    let _ = writeln!(s, "pooled maxF {:.4}", report.pooled_max_f);
    let empty = report.images.iter().filter(|m| m.empty_gt).count();
    if empty > 0 {
        let _ = writeln!(
            s,
            "{empty} image(s) with empty ground truth (recall taken as 1)"
        );
    }
    if !report.unmatched.is_empty() {
        let _ = writeln!(s, "{} unmatched file(s) skipped:", report.unmatched.len());
        for u in &report.unmatched {
            let _ = writeln!(s, "  {u}");
        }
    }
    s
}

pub fn write_reports(report: &MetricsReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, text) in [
        (METRICS_CSV, metrics_csv(report)),
        (PR_CSV, pr_csv(report)),
        (REPORT_TXT, report_text(report)),
    ] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Rows of a metrics CSV as `(image, maxF, MAE, S)`.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, f64, f64, f64)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("image,maxF,MAE,S") {
        return Err("missing `image,maxF,MAE,S` header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.rsplitn(4, ',').collect();
            if f.len() != 4 {
                return Err(format!("line {}: expected 4 fields", i + 2));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| format!("line {}: bad number `{s}`", i + 2))
            };
            Ok((f[3].to_string(), num(f[2])?, num(f[1])?, num(f[0])?))
        })
        .collect()
}

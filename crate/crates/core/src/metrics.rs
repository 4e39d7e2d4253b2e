//! Saliency evaluation: threshold sweeps, max F-measure, MAE and the
//! structure measure.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::image::SaliencyMap;

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const ALPHA: f64 = 0.5;

/// `floor(p · 255)` clamped to a byte.
pub fn quantize(p: f64) -> u8 {
    libm::floor(p.clamp(0.0, 1.0) * 255.0) as u8
}

fn check_size(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<()> {
    if pred.same_size(gt) {
        Ok(())
    } else {
        Err(shape_err(alloc::format!(
            "prediction is {}×{}, ground truth is {}×{}",
            pred.width,
            pred.height,
            gt.width,
            gt.height
        )))
    }
}

/// True-positive and false-positive counts for every threshold, plus the
/// number of foreground ground-truth pixels. Counts from several images add.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub positives: u64,
}

impl Default for PrCounts {
    fn default() -> Self {
        Self {
            tp: alloc::vec![0; THRESHOLDS],
            fp: alloc::vec![0; THRESHOLDS],
            positives: 0,
        }
    }
}

impl PrCounts {
    /// Pixel `p` is predicted foreground at threshold `t` iff
    /// `quantize(p) > t`. Ground truth is foreground iff `> 0.5`.
    pub fn from_maps(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Self> {
        check_size(pred, gt)?;
        let mut fg = [0u64; THRESHOLDS];
        let mut bg = [0u64; THRESHOLDS];
        let mut positives = 0;
        for (&p, &y) in pred.data.iter().zip(&gt.data) {
            let q = usize::from(quantize(p));
            if y > 0.5 {
                fg[q] += 1;
                positives += 1;
            } else {
                bg[q] += 1;
            }
        }
        // counts of q > t, from the top down
        let mut out = Self {
            positives,
            ..Self::default()
        };
        let (mut tp, mut fp) = (0, 0);
        for t in (0..THRESHOLDS).rev() {
            out.tp[t] = tp;
            out.fp[t] = fp;
            tp += fg[t];
            fp += bg[t];
        }
        Ok(out)
    }

    pub fn add(&mut self, other: &PrCounts) {
        for t in 0..THRESHOLDS {
            self.tp[t] += other.tp[t];
            self.fp[t] += other.fp[t];
        }
        self.positives += other.positives;
    }

    pub fn curve(&self) -> PrCurve {
        let mut precision = alloc::vec![0.0; THRESHOLDS];
        let mut recall = alloc::vec![0.0; THRESHOLDS];
        for t in 0..THRESHOLDS {
            let (tp, fp) = (self.tp[t], self.fp[t]);
            precision[t] = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            recall[t] = if self.positives == 0 {
                1.0
            } else {
                tp as f64 / self.positives as f64
            };
        }
        PrCurve {
            precision,
            recall,
            empty_gt: self.positives == 0,
        }
    }
}

/// Precision and recall at thresholds `0..=255`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// The ground truth had no foreground; recall is 1 by convention.
    pub empty_gt: bool,
}

pub fn pr_curve(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<PrCurve> {
    Ok(PrCounts::from_maps(pred, gt)?.curve())
}

/// `(1+β²)·P·R / (β²·P + R)`, 0 when both are 0.
pub fn f_beta(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

pub fn max_f(curve: &PrCurve, beta2: f64) -> f64 {
    curve
        .precision
        .iter()
        .zip(&curve.recall)
        .map(|(&p, &r)| f_beta(p, r, beta2))
        .fold(0.0, f64::max)
}

pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_size(pred, gt)?;
    let n = pred.data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Machine epsilon as used by the reference implementation.
const EPS: f64 = f64::EPSILON;

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0);
    for x in xs {
        s += x;
        n += 1;
    }
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// `2x / (x² + 1 + σ + ε)` over the pixels selected by `mask`.
fn object_score(values: &[f64], mask: impl Fn(usize) -> bool) -> f64 {
    let sel: Vec<f64> = (0..values.len())
        .filter(|&i| mask(i))
        .map(|i| values[i])
        .collect();
    if sel.is_empty() {
        return 0.0;
    }
    let (x, n) = mean(sel.iter().copied());
    let sigma = if n > 1 {
        libm::sqrt(sel.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &SaliencyMap, gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred
        .data
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if g { p } else { 0.0 })
        .collect();
    let bg: Vec<f64> = pred
        .data
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if g { 0.0 } else { 1.0 - p })
        .collect();
    let o_fg = object_score(&fg, |i| gt[i]);
    let o_bg = object_score(&bg, |i| !gt[i]);
    let u = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    u * o_fg + (1.0 - u) * o_bg
}

/// Structural similarity of one block, following the reference's
/// single-window form.
fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let (x, _) = mean(pred.iter().copied());
    let (y, _) = mean(gt.iter().copied());
    let d = n - 1.0 + EPS;
    let sx2 = pred.iter().map(|p| (p - x) * (p - x)).sum::<f64>() / d;
    let sy2 = gt.iter().map(|g| (g - y) * (g - y)).sum::<f64>() / d;
    let sxy = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - x) * (g - y))
        .sum::<f64>()
        / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &SaliencyMap, gt: &[bool]) -> f64 {
    let (w, h) = (pred.width, pred.height);
    // 1-based centroid, rounded half away from zero
    let total = gt.iter().filter(|&&g| g).count() as f64;
    let (cx, cy) = if total == 0.0 {
        (libm::round(w as f64 / 2.0), libm::round(h as f64 / 2.0))
    } else {
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if gt[y * w + x] {
                    sx += (x + 1) as f64;
                    sy += (y + 1) as f64;
                }
            }
        }
        (libm::round(sx / total), libm::round(sy / total))
    };
    let (cx, cy) = (cx as usize, cy as usize);
    let area = (w * h) as f64;
    let blocks = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let mut q = 0.0;
    for (rows, cols) in blocks {
        let n = rows.len() * cols.len();
        if n == 0 {
            continue;
        }
        let mut p = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        for y in rows {
            for x in cols.clone() {
                p.push(pred.data[y * w + x]);
                g.push(if gt[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        q += n as f64 / area * ssim(&p, &g);
    }
    q
}

/// Structure measure `α·S_o + (1−α)·S_r`, clamped to `[0, 1]`. An
/// all-background ground truth scores `1 − mean(pred)`, an all-foreground
/// one `mean(pred)`.
pub fn s_measure(pred: &SaliencyMap, gt: &SaliencyMap, alpha: f64) -> Result<f64> {
    check_size(pred, gt)?;
    let mask: Vec<bool> = gt.data.iter().map(|&v| v > 0.5).collect();
    let fg = mask.iter().filter(|&&g| g).count();
    let (mp, _) = mean(pred.data.iter().copied());
    let s = if fg == 0 {
        1.0 - mp
    } else if fg == mask.len() {
        mp
    } else {
        alpha * s_object(pred, &mask) + (1.0 - alpha) * s_region(pred, &mask)
    };
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub max_f: f64,
    pub mae: f64,
    pub s: f64,
    pub empty_gt: bool,
}

impl ImageMetrics {
    pub fn compute(name: impl Into<String>, pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Self> {
        let curve = pr_curve(pred, gt)?;
        Ok(Self {
            name: name.into(),
            max_f: max_f(&curve, BETA2),
            mae: mae(pred, gt)?,
            s: s_measure(pred, gt, ALPHA)?,
            empty_gt: curve.empty_gt,
        })
    }
}

/// Per-image metrics, their means and the curve from pooled counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean_max_f: f64,
    pub mean_mae: f64,
    pub mean_s: f64,
    pub pooled: PrCurve,
    /// Max F of the pooled curve.
    pub pooled_max_f: f64,
    /// Names of inputs that had no counterpart and were skipped.
    pub unmatched: Vec<String>,
}

/// Evaluates named `(prediction, ground truth)` pairs in the given order.
pub fn evaluate<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a SaliencyMap, &'a SaliencyMap)>,
) -> Result<MetricsReport> {
    let mut images = Vec::new();
    let mut pooled = PrCounts::default();
    for (name, pred, gt) in pairs {
        pooled.add(&PrCounts::from_maps(pred, gt)?);
        images.push(ImageMetrics::compute(name, pred, gt)?);
    }
    let n = images.len().max(1) as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let curve = pooled.curve();
    Ok(MetricsReport {
        mean_max_f: avg(|m| m.max_f),
        mean_mae: avg(|m| m.mae),
        mean_s: avg(|m| m.s),
        pooled_max_f: max_f(&curve, BETA2),
        pooled: curve,
        images,
        unmatched: Vec::new(),
    })
}

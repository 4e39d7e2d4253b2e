//! Independent reference implementations shared by the oracle tests and
//! the acceptance run.
#![allow(dead_code)]

use msod_core::image::SaliencyMap;
use msod_core::metrics::{ALPHA, THRESHOLDS};
use msod_core::nlgm::DsnlbParams;
use msod_core::params::{Conv, Init, ParamSet};
use msod_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `[C, H, W]` as `C` rows of `K = H·W`.
pub fn rows(t: &Tensor) -> Mat {
    let (c, h, w) = t.chw().unwrap();
    (0..c)
        .map(|i| t.data()[i * h * w..(i + 1) * h * w].to_vec())
        .collect()
}

pub fn conv1x1(params: &ParamSet, conv: &Conv, a: &Mat) -> Mat {
    let w = params.get(conv.weight).data();
    let b = conv.bias.map(|b| params.get(b).data());
    let (cin, k) = (a.len(), a[0].len());
    (0..conv.c_out)
        .map(|o| {
            (0..k)
                .map(|p| {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..cin {
                        acc += w[o * cin + i] * a[i][p];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn softmax_rows(m: &mut Mat) {
    for row in m.iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `S[i][j] = softmax_j Σ_c B[c][i]·C[c][j]`; `out[c][i] = Σ_j D[c][j]·S[i][j] + a[c][i]`.
pub fn spatial_oracle(params: &ParamSet, p: &DsnlbParams, a: &Mat) -> (Mat, Mat) {
    let b = conv1x1(params, &p.query, a);
    let c = conv1x1(params, &p.key, a);
    let d = conv1x1(params, &p.value, a);
    let (ch, k) = (a.len(), a[0].len());
    let mut s = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            for q in 0..ch {
                s[i][j] += b[q][i] * c[q][j];
            }
        }
    }
    softmax_rows(&mut s);
    let mut out = a.clone();
    for q in 0..ch {
        for i in 0..k {
            for j in 0..k {
                out[q][i] += d[q][j] * s[i][j];
            }
        }
    }
    (out, s)
}

/// `X[i][j] = softmax_j Σ_k a[i][k]·a[j][k]`; `out[c][k] = Σ_i X[i][c]·a[i][k] + a[c][k]`.
pub fn channel_oracle(a: &Mat) -> (Mat, Mat) {
    let (ch, k) = (a.len(), a[0].len());
    let mut x = vec![vec![0.0; ch]; ch];
    for i in 0..ch {
        for j in 0..ch {
            for p in 0..k {
                x[i][j] += a[i][p] * a[j][p];
            }
        }
    }
    softmax_rows(&mut x);
    let mut out = a.clone();
    for c in 0..ch {
        for p in 0..k {
            for i in 0..ch {
                out[c][p] += x[i][c] * a[i][p];
            }
        }
    }
    (out, x)
}

pub fn dsnlb_oracle(params: &ParamSet, p: &DsnlbParams, a: &Mat) -> Mat {
    let (sn, _) = spatial_oracle(params, p, a);
    let (cn, _) = channel_oracle(a);
    let sum: Mat = sn
        .iter()
        .zip(&cn)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect();
    conv1x1(params, &p.out, &sum)
}

pub fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    let flat: Vec<f64> = m.iter().flatten().cloned().collect();
    assert_eq!(t.len(), flat.len());
    t.data()
        .iter()
        .zip(&flat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Block with random weights and biases.
pub fn random_block(channels: usize, seed: u64) -> (ParamSet, DsnlbParams) {
    let mut params = ParamSet::new();
    let p = DsnlbParams::new(&mut params, &Init::new(seed), "b", channels).unwrap();
    randomize_biases(&mut params, seed);
    (params, p)
}

pub fn randomize_biases(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.name(id).ends_with(".bias") {
            let shape = params.get(id).shape().to_vec();
            params.replace(id, random(&shape, &mut rng)).unwrap();
        }
    }
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    ]
}

pub fn map(w: usize, h: usize, data: Vec<f64>) -> SaliencyMap {
    SaliencyMap::new(w, h, data).unwrap()
}

pub fn random_pair(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (SaliencyMap, SaliencyMap) {
    let density: f64 = rng.gen_range(0.0..1.0);
    let pred = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let gt = (0..w * h)
        .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
        .collect();
    (map(w, h, pred), map(w, h, gt))
}

/// Per threshold: binarize, count, divide.
pub fn brute_curve(pred: &SaliencyMap, gt: &SaliencyMap) -> (Vec<f64>, Vec<f64>) {
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for t in 0..THRESHOLDS {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let q = (p.clamp(0.0, 1.0) * 255.0).floor() as usize;
            let on = q > t;
            match (on, g > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        precision.push(if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
        recall.push(if tp + fneg == 0 {
            1.0
        } else {
            tp as f64 / (tp + fneg) as f64
        });
    }
    (precision, recall)
}

pub fn brute_max_f(precision: &[f64], recall: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for (&p, &r) in precision.iter().zip(recall) {
        let f = if p == 0.0 && r == 0.0 {
            0.0
        } else {
            (1.0 + 0.3) * p * r / (0.3 * p + r)
        };
        best = best.max(f);
    }
    best
}

pub fn brute_mae(pred: &SaliencyMap, gt: &SaliencyMap) -> f64 {
    let mut sum = 0.0;
    for y in 0..pred.height {
        for x in 0..pred.width {
            sum += (pred.get(x, y) - gt.get(x, y)).abs();
        }
    }
    sum / (pred.width * pred.height) as f64
}

// structure measure, transcribed from the reference scripts

const EPS: f64 = f64::EPSILON;

pub fn mean2(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for one element.
pub fn std1(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean2(xs);
    (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn object(pred: &[f64], gt: &[bool]) -> f64 {
    let sel: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g)
        .map(|(&p, _)| p)
        .collect();
    if sel.is_empty() {
        return 0.0;
    }
    let x = mean2(&sel);
    2.0 * x / (x * x + 1.0 + std1(&sel) + EPS)
}

pub fn ref_s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if g { p } else { 0.0 })
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if g { 0.0 } else { 1.0 - p })
        .collect();
    let not: Vec<bool> = gt.iter().map(|g| !g).collect();
    let u = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    u * object(&fg, gt) + (1.0 - u) * object(&bg, &not)
}

pub fn ref_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean2(p);
    let y = mean2(g);
    let sx2 = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
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

/// Column-major thinking of the reference mapped onto row-major data:
/// `X` counts columns, `Y` rows, both 1-based.
pub fn ref_s_region(pred: &SaliencyMap, gt: &[bool]) -> f64 {
    let (wid, hei) = (pred.width, pred.height);
    let total = gt.iter().filter(|&&g| g).count() as f64;
    let (x, y) = if total == 0.0 {
        ((wid as f64 / 2.0).round(), (hei as f64 / 2.0).round())
    } else {
        let mut col_sum = 0.0;
        let mut row_sum = 0.0;
        for r in 0..hei {
            for c in 0..wid {
                if gt[r * wid + c] {
                    col_sum += (c + 1) as f64;
                    row_sum += (r + 1) as f64;
                }
            }
        }
        ((col_sum / total).round(), (row_sum / total).round())
    };
    let (xu, yu) = (x as usize, y as usize);
    let area = (wid * hei) as f64;
    let w1 = x * y / area;
    let w2 = (wid as f64 - x) * y / area;
    let w3 = x * (hei as f64 - y) / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> Option<f64> {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred.data[r * wid + c]);
                g.push(if gt[r * wid + c] { 1.0 } else { 0.0 });
            }
        }
        (!p.is_empty()).then(|| ref_ssim(&p, &g))
    };
    let mut q = 0.0;
    for (w, b) in [
        (w1, block(0, yu, 0, xu)),
        (w2, block(0, yu, xu, wid)),
        (w3, block(yu, hei, 0, xu)),
        (w4, block(yu, hei, xu, wid)),
    ] {
        if let Some(v) = b {
            q += w * v;
        }
    }
    q
}

pub fn ref_structure(pred: &SaliencyMap, gt: &SaliencyMap) -> f64 {
    let mask: Vec<bool> = gt.data.iter().map(|&v| v > 0.5).collect();
    let y = mask.iter().filter(|&&g| g).count() as f64 / mask.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean2(&pred.data)
    } else if y == 1.0 {
        mean2(&pred.data)
    } else {
        ALPHA * ref_s_object(&pred.data, &mask) + (1.0 - ALPHA) * ref_s_region(pred, &mask)
    };
    q.clamp(0.0, 1.0)
}

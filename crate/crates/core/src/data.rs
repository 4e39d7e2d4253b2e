//! Synthetic multi-object scenes, edge ground truth, object counting and
//! count-based curation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::train::Sample;

/// Largest object count the generator supports.
pub const MAX_OBJECTS: usize = 19;
/// Placement attempts per object before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 1000;
/// Smallest component that counts as an object.
pub const MIN_AREA: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rect,
    Triangle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub kind: ShapeKind,
    /// Centre in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Half extent (radius for discs).
    pub size: f64,
    pub color: [u8; 3],
    /// Pixel count of the rasterized object.
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: usize,
    /// Half-extent range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum Chebyshev distance between pixels of different objects.
    pub gap: usize,
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, objects: usize) -> Self {
        Self {
            width,
            height,
            objects,
            min_size: 3.0,
            max_size: (width.min(height) as f64 / 6.0).max(3.0),
            gap: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub objects: Vec<PlacedObject>,
}

impl Scene {
    pub fn edges(&self) -> GrayImage {
        sobel_edges(&self.mask)
    }

    pub fn sample(&self) -> Sample {
        to_sample(&self.image, &self.mask)
    }
}

/// Builds a training sample, deriving the edge map from the mask.
pub fn to_sample(image: &RgbImage, mask: &GrayImage) -> Sample {
    Sample {
        image: image.to_tensor(),
        mask: mask.to_binary_tensor(),
        edge: sobel_edges(mask).to_binary_tensor(),
    }
}

fn raster(kind: ShapeKind, cx: f64, cy: f64, s: f64, x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    match kind {
        ShapeKind::Disc => px * px + py * py <= s * s,
        ShapeKind::Rect => px.abs() <= s && py.abs() <= 0.7 * s,
        ShapeKind::Triangle => {
            // apex up, base at +s
            py <= s && py >= -s && px.abs() <= (py + s) / 2.0
        }
    }
}

fn palette(i: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 8] = [
        [230, 40, 40],
        [40, 200, 60],
        [40, 90, 235],
        [240, 210, 30],
        [220, 50, 220],
        [30, 210, 220],
        [250, 140, 20],
        [245, 245, 245],
    ];
    COLORS[i % COLORS.len()]
}

/// Renders `spec.objects` non-overlapping shapes on a textured background.
/// Deterministic in `(spec, seed)`.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(invalid("scene extents must be ≥ 1"));
    }
    if spec.objects > MAX_OBJECTS {
        return Err(invalid(format!(
            "at most {MAX_OBJECTS} objects per scene, asked for {}",
            spec.objects
        )));
    }
    if !(spec.min_size > 0.0 && spec.max_size >= spec.min_size) {
        return Err(invalid("object size range must satisfy 0 < min ≤ max"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = alloc::vec![0u8; w * h];
    let mut blocked = alloc::vec![false; w * h];
    let mut objects = Vec::with_capacity(spec.objects);
    let gap = spec.gap as isize;

    for k in 0..spec.objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Disc,
                1 => ShapeKind::Rect,
                _ => ShapeKind::Triangle,
            };
            let s = rng.gen_range(spec.min_size..=spec.max_size);
            if 2.0 * s + 2.0 > w.min(h) as f64 {
                continue;
            }
            let cx = rng.gen_range(s + 1.0..=w as f64 - s - 1.0);
            let cy = rng.gen_range(s + 1.0..=h as f64 - s - 1.0);
            let x0 = libm::floor(cx - s - 1.0).max(0.0) as usize;
            let y0 = libm::floor(cy - s - 1.0).max(0.0) as usize;
            let x1 = (libm::ceil(cx + s + 1.0) as usize).min(w);
            let y1 = (libm::ceil(cy + s + 1.0) as usize).min(h);
            let mut pixels = Vec::new();
            let mut clash = false;
            for y in y0..y1 {
                for x in x0..x1 {
                    if raster(kind, cx, cy, s, x, y) {
                        clash |= blocked[y * w + x];
                        pixels.push((x, y));
                    }
                }
            }
            if clash || pixels.len() < MIN_AREA {
                continue;
            }
            placed = Some((kind, cx, cy, s, pixels));
            break;
        }
        let Some((kind, cx, cy, s, pixels)) = placed else {
            return Err(Error::Unplaceable(format!(
                "object {} of {} did not fit on a {w}×{h} canvas after {PLACEMENT_ATTEMPTS} attempts",
                k + 1,
                spec.objects
            )));
        };
        for &(x, y) in &pixels {
            label[y * w + x] = (k + 1) as u8;
            for dy in -gap..=gap {
                for dx in -gap..=gap {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        blocked[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
        let offset = rng.gen_range(0..8);
        objects.push(PlacedObject {
            kind,
            cx,
            cy,
            size: s,
            color: palette(k + offset),
            area: pixels.len(),
        });
    }

    // low-contrast, desaturated background texture
    let base = rng.gen_range(70.0..130.0);
    let tint: [f64; 3] = [
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
    ];
    let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let mut image = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let l = label[y * w + x];
            let noise = rng.gen_range(-10.0..10.0);
            if l == 0 {
                let wave = 25.0 * libm::sin(fx * x as f64 + px) * libm::cos(fy * y as f64 + py);
                for t in tint {
                    image.push((base + t + wave + noise).clamp(0.0, 255.0) as u8);
                }
            } else {
                for c in objects[l as usize - 1].color {
                    image.push((f64::from(c) + noise).clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    let mask = label.iter().map(|&l| if l > 0 { 255 } else { 0 }).collect();
    Ok(Scene {
        image: RgbImage::new(w, h, image)?,
        mask: GrayImage::new(w, h, mask)?,
        objects,
    })
}

/// Settings for a whole generated collection.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive object-count range; each scene draws uniformly from it.
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Object counts spread like the curated multi-object set.
    pub fn msod(scenes: usize, width: usize, height: usize, seed: u64) -> Self {
        Self {
            scenes,
            width,
            height,
            min_objects: 3,
            max_objects: MAX_OBJECTS,
            seed,
        }
    }

    /// Per-scene spec and seed of scene `i`.
    pub fn scene(&self, i: usize) -> (SceneSpec, u64) {
        let seed = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(i as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(self.min_objects..=self.max_objects);
        let mut spec = SceneSpec::new(self.width, self.height, n);
        // crowded scenes get smaller objects
        let room = libm::sqrt((self.width * self.height) as f64 / (6.0 * n.max(1) as f64)) / 2.0;
        spec.max_size = spec.max_size.min(room).max(spec.min_size);
        (spec, rng.gen())
    }

    pub fn generate(&self) -> Result<Vec<Scene>> {
        if self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return Err(invalid(format!(
                "object range {}..={} must lie within 0..={MAX_OBJECTS}",
                self.min_objects, self.max_objects
            )));
        }
        (0..self.scenes)
            .map(|i| {
                let (spec, seed) = self.scene(i);
                synth_scene(&spec, seed)
            })
            .collect()
    }
}

/// Binary edge map (0 / 255): pixels where the 3×3 Sobel response of the
/// binary mask is nonzero. Borders replicate the outermost pixels, so a
/// constant mask has no edges.
pub fn sobel_edges(mask: &GrayImage) -> GrayImage {
    let (w, h) = (mask.width, mask.height);
    let at = |x: isize, y: isize| -> i32 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        i32::from(mask.is_set(x, y))
    };
    let mut out = alloc::vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
            if gx != 0 || gy != 0 {
                out[y as usize * w + x as usize] = 255;
            }
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: out,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Labeled components of a binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// 0 for background, otherwise the 1-based component label.
    pub labels: Vec<u32>,
    /// `sizes[l - 1]` is the pixel count of label `l`.
    pub sizes: Vec<usize>,
    /// `noise[l - 1]` marks components below the minimum area.
    pub noise: Vec<bool>,
    /// Components at or above the minimum area.
    pub count: usize,
}

/// Flood-fill labeling of `mask` (foreground = value ≥ 128).
pub fn count_components(mask: &GrayImage, conn: Connectivity, min_area: usize) -> Components {
    let (w, h) = (mask.width, mask.height);
    let mut labels = alloc::vec![0u32; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    for start in 0..w * h {
        if labels[start] != 0 || mask.data[start] < 128 {
            continue;
        }
        let l = sizes.len() as u32 + 1;
        labels[start] = l;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if labels[j] == 0 && mask.data[j] >= 128 {
                    labels[j] = l;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    let noise: Vec<bool> = sizes.iter().map(|&s| s < min_area).collect();
    let count = noise.iter().filter(|&&n| !n).count();
    Components {
        labels,
        sizes,
        noise,
        count,
    }
}

/// Objects in a mask under the default rule (8-connected, ≥ 10 px).
pub fn object_count(mask: &GrayImage) -> usize {
    count_components(mask, Connectivity::Eight, MIN_AREA).count
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRecord {
    pub image: String,
    pub mask: String,
    pub edge: String,
    pub count: usize,
}

/// Ordered dataset listing; one tab-separated record per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(invalid(format!(
                    "index line {}: expected 4 tab-separated fields, got {}",
                    n + 1,
                    fields.len()
                )));
            }
            let count = fields[3].parse().map_err(|_| {
                invalid(format!(
                    "index line {}: bad object count `{}`",
                    n + 1,
                    fields[3]
                ))
            })?;
            records.push(IndexRecord {
                image: fields[0].to_string(),
                mask: fields[1].to_string(),
                edge: fields[2].to_string(),
                count,
            });
        }
        Ok(Self { records })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.image, r.mask, r.edge, r.count
            ));
        }
        s
    }
}

/// `(object_count, frequency)` in ascending count order.
pub fn histogram(counts: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut h = BTreeMap::new();
    for c in counts {
        *h.entry(c).or_insert(0) += 1;
    }
    h.into_iter().collect()
}

pub fn histogram_text(hist: &[(usize, usize)]) -> String {
    hist.iter().map(|(c, f)| format!("{c}\t{f}\n")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Curated {
    pub index: DatasetIndex,
    /// Records whose mask could not be counted, with the reason.
    pub skipped: Vec<(String, String)>,
    pub histogram: Vec<(usize, usize)>,
}

/// Keeps the records whose recounted object number is at least
/// `min_objects`; retained records carry the recomputed count.
pub fn curate(
    index: &DatasetIndex,
    min_objects: usize,
    mut count: impl FnMut(&IndexRecord) -> core::result::Result<usize, String>,
) -> Curated {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for r in &index.records {
        match count(r) {
            Ok(n) if n >= min_objects => kept.push(IndexRecord {
                count: n,
                ..r.clone()
            }),
            Ok(_) => {}
            Err(e) => skipped.push((r.mask.clone(), e)),
        }
    }
    let histogram = histogram(kept.iter().map(|r| r.count));
    Curated {
        index: DatasetIndex { records: kept },
        skipped,
        histogram,
    }
}

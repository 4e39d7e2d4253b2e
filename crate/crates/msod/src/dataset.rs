//! Dataset directories: `images/*.ppm`, `masks/*.pgm`, `edges/*.pgm`, an
//! index listing them and the object-count histogram.

use std::fs;
use std::path::{Component, Path, PathBuf};

use msod_core::data::{
    curate, histogram, histogram_text, object_count, Curated, DatasetIndex, DatasetSpec,
    IndexRecord,
};
use msod_core::image::{GrayImage, RgbImage};
use msod_core::train::Sample;

use crate::error::{Error, Result};
use crate::pnm;

pub const INDEX_FILE: &str = "index.tsv";
pub const HISTOGRAM_FILE: &str = "histogram.tsv";

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates `spec` into `dir`. The count column is recomputed from each
/// written mask.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<DatasetIndex> {
    let scenes = spec.generate()?;
    for sub in ["images", "masks", "edges"] {
        mkdir(&dir.join(sub))?;
    }
    let mut index = DatasetIndex::default();
    for (i, scene) in scenes.iter().enumerate() {
        let rec = IndexRecord {
            image: format!("images/{i:05}.ppm"),
            mask: format!("masks/{i:05}.pgm"),
            edge: format!("edges/{i:05}.pgm"),
            count: object_count(&scene.mask),
        };
        pnm::write_ppm(&dir.join(&rec.image), &scene.image)?;
        pnm::write_pgm(&dir.join(&rec.mask), &scene.mask)?;
        pnm::write_pgm(&dir.join(&rec.edge), &scene.edges())?;
        index.records.push(rec);
    }
    write_text(&dir.join(INDEX_FILE), &index.to_text())?;
    let hist = histogram(index.records.iter().map(|r| r.count));
    write_text(&dir.join(HISTOGRAM_FILE), &histogram_text(&hist))?;
    Ok(index)
}

pub fn read_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetIndex::parse(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn base_dir(index_path: &Path) -> &Path {
    index_path.parent().unwrap_or(Path::new(""))
}

/// One index record with its rasters loaded.
#[derive(Clone, Debug)]
pub struct Record {
    /// File name of the image without extension.
    pub name: String,
    pub image: RgbImage,
    pub mask: GrayImage,
    pub edge: GrayImage,
}

impl Record {
    pub fn sample(&self) -> Sample {
        Sample {
            image: self.image.to_tensor(),
            mask: self.mask.to_binary_tensor(),
            edge: self.edge.to_binary_tensor(),
        }
    }
}

pub fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Loads every record of the index at `index_path`; paths are relative to
/// the index's directory.
pub fn load_records(index_path: &Path) -> Result<Vec<Record>> {
    let index = read_index(index_path)?;
    let base = base_dir(index_path);
    index
        .records
        .iter()
        .map(|r| {
            let image = pnm::read_ppm(&base.join(&r.image))?;
            let mask = pnm::read_pgm(&base.join(&r.mask))?;
            let edge = pnm::read_pgm(&base.join(&r.edge))?;
            let dims = |w, h| (w, h) == (image.width, image.height);
            if !dims(mask.width, mask.height) || !dims(edge.width, edge.height) {
                return Err(Error::format(
                    &base.join(&r.mask),
                    format!("mask or edge size differs from `{}`", r.image),
                ));
            }
            Ok(Record {
                name: stem(&r.image),
                image,
                mask,
                edge,
            })
        })
        .collect()
}

/// `path` relative to `base` when both are absolute or both relative;
/// walks up with `..` as needed.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<Component> = path.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c);
    }
    out
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

/// Retains records whose recounted mask has at least `min_objects`
/// components and writes the new index to `out` with the histogram at
/// `hist_out`. Paths in `out` are rewritten relative to its directory.
pub fn curate_file(
    index_path: &Path,
    min_objects: usize,
    out: &Path,
    hist_out: &Path,
) -> Result<Curated> {
    let index = read_index(index_path)?;
    let base = base_dir(index_path);
    let mut curated = curate(&index, min_objects, |r| {
        pnm::read_pgm(&base.join(&r.mask))
            .map(|m| object_count(&m))
            .map_err(|e| e.to_string())
    });
    let from = absolute(base)?;
    let to = absolute(base_dir(out))?;
    if from != to {
        let rebase = |p: &str| -> String {
            relative_to(&from.join(p), &to)
                .to_string_lossy()
                .replace('\\', "/")
        };
        for r in &mut curated.index.records {
            r.image = rebase(&r.image);
            r.mask = rebase(&r.mask);
            r.edge = rebase(&r.edge);
        }
    }
    write_text(out, &curated.index.to_text())?;
    write_text(hist_out, &histogram_text(&curated.histogram))?;
    Ok(curated)
}

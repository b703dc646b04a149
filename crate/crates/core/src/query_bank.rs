//! Per-category store of vision-query features.
//!
//! Features come from RoI pooling over the frozen image encoder's grid
//! inside a context-enlarged box. Each category keeps at most `capacity`
//! entries and evicts the oldest first.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, ImageFeatures, Model};
use crate::error::{Error, Result};
use crate::params::read_f32_le;
use crate::raster::Raster;
use crate::synth::{read_json, write_json, SceneSample};

pub const BANK_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Scales width and height by `sqrt(gamma)` about the centre, then clips
/// to `[0, bound]` on both axes.
pub fn enlarge_box(bbox: [f64; 4], gamma: f64, bound: f64) -> Result<[f64; 4]> {
    if !(1.0..).contains(&gamma) {
        return Err(Error::Argument(format!("gamma must be >= 1, got {gamma}")));
    }
    let [x1, y1, x2, y2] = bbox;
    if !(x2 > x1 && y2 > y1) {
        return Err(Error::Argument(format!("degenerate box {bbox:?}")));
    }
    let s = gamma.sqrt();
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let (hw, hh) = ((x2 - x1) * s / 2.0, (y2 - y1) * s / 2.0);
    Ok([
        (cx - hw).clamp(0.0, bound),
        (cy - hh).clamp(0.0, bound),
        (cx + hw).clamp(0.0, bound),
        (cy + hh).clamp(0.0, bound),
    ])
}

/// Grid cells whose centres lie inside `region` (closed), or the single
/// nearest cell when none do.
pub fn pooled_cells(centers: &[(f64, f64)], region: &[f64; 4]) -> Vec<usize> {
    let inside: Vec<usize> = centers
        .iter()
        .enumerate()
        .filter(|(_, &(cx, cy))| cx >= region[0] && cx <= region[2] && cy >= region[1] && cy <= region[3])
        .map(|(i, _)| i)
        .collect();
    if !inside.is_empty() {
        return inside;
    }
    let (mx, my) = ((region[0] + region[2]) / 2.0, (region[1] + region[3]) / 2.0);
    let nearest = centers
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1 .0 - mx).powi(2) + (a.1 .1 - my).powi(2);
            let db = (b.1 .0 - mx).powi(2) + (b.1 .1 - my).powi(2);
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .expect("grid has cells");
    vec![nearest]
}

/// RoI feature for `bbox` from already encoded image features.
pub fn pool_query(model: &Model, features: &ImageFeatures, bbox: [f64; 4], gamma: f64) -> Result<Array1<f64>> {
    let region = enlarge_box(bbox, gamma, model.config.image_size as f64)?;
    let cells = pooled_cells(&model.grid_centers(), &region);
    let mut acc = Array1::zeros(features.grid.ncols());
    for &c in &cells {
        acc += &features.grid.row(c);
    }
    Ok(acc / cells.len() as f64)
}

pub fn extract_query(model: &Model, image: &Raster, bbox: [f64; 4], gamma: f64) -> Result<Array1<f64>> {
    let features = model.encode_image(image)?;
    pool_query(model, &features, bbox, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    /// Relative paths resolve against the directory of the exemplar file.
    pub image_path: PathBuf,
    pub bbox: [f64; 4],
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionQueryBank {
    d: usize,
    capacity: usize,
    categories: Vec<String>,
    entries: Vec<VecDeque<Vec<f32>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankManifest {
    format_version: u32,
    d: usize,
    #[serde(rename = "K")]
    capacity: usize,
    categories: Vec<CategoryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryEntry {
    name: String,
    count: usize,
}

impl VisionQueryBank {
    pub fn new(d: usize, capacity: usize, categories: Vec<String>) -> Result<Self> {
        if d == 0 || capacity == 0 {
            return Err(Error::Config("bank dimension and capacity must be positive".into()));
        }
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].contains(c) {
                return Err(Error::Vocabulary(format!("category `{c}` listed twice")));
            }
        }
        let entries = vec![VecDeque::new(); categories.len()];
        Ok(Self {
            d,
            capacity,
            categories,
            entries,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Vocabulary(format!("category `{name}` is not in the bank")))
    }

    pub fn count(&self, category: usize) -> usize {
        self.entries[category].len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.entries.iter().map(VecDeque::len).collect()
    }

    pub fn entries(&self, category: usize) -> Array2<f64> {
        let list = &self.entries[category];
        let mut out = Array2::zeros((list.len(), self.d));
        for (r, f) in list.iter().enumerate() {
            for (c, &v) in f.iter().enumerate() {
                out[[r, c]] = v as f64;
            }
        }
        out
    }

    /// Appends a feature (stored as f32), evicting the oldest entry when
    /// the category is full.
    pub fn add(&mut self, category: usize, feature: &[f64]) -> Result<()> {
        if category >= self.categories.len() {
            return Err(Error::Vocabulary(format!("category index {category} out of range")));
        }
        if feature.len() != self.d {
            return Err(Error::Shape(format!("feature has {} values, bank d is {}", feature.len(), self.d)));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite query feature".into()));
        }
        let list = &mut self.entries[category];
        list.push_back(feature.iter().map(|&v| v as f32).collect());
        if list.len() > self.capacity {
            list.pop_front();
        }
        Ok(())
    }

    pub fn add_named(&mut self, category: &str, feature: &[f64]) -> Result<()> {
        let c = self.category_index(category)?;
        self.add(c, feature)
    }

    /// `k` entries of one category: without replacement when the category
    /// holds at least `k`, with replacement otherwise, and `0 x d` when it
    /// is empty.
    pub fn sample<R: Rng>(&self, category: usize, k: usize, rng: &mut R) -> Array2<f64> {
        let list = &self.entries[category];
        let n = list.len();
        if n == 0 || k == 0 {
            return Array2::zeros((0, self.d));
        }
        let picks: Vec<usize> = if n >= k {
            index::sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut out = Array2::zeros((k, self.d));
        for (r, &i) in picks.iter().enumerate() {
            for (c, &v) in list[i].iter().enumerate() {
                out[[r, c]] = v as f64;
            }
        }
        out
    }

    /// One sample per category, in category order.
    pub fn sample_all<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<Array2<f64>> {
        (0..self.categories.len()).map(|c| self.sample(c, k, rng)).collect()
    }

    /// Re-extracts and stores every detection scoring at least `threshold`
    /// under its predicted category. Returns the number of additions.
    pub fn online_update(
        &mut self,
        model: &Model,
        features: &ImageFeatures,
        detections: &[Detection],
        threshold: f64,
        gamma: f64,
    ) -> Result<usize> {
        let mut added = 0;
        for det in detections.iter().filter(|d| d.score >= threshold) {
            let f = pool_query(model, features, det.bbox, gamma)?;
            self.add(det.category, f.as_slice().expect("contiguous"))?;
            added += 1;
        }
        Ok(added)
    }

    /// Adds one query per annotated instance, scenes in the given order.
    pub fn ingest_scenes(&mut self, model: &Model, scenes: &[SceneSample], gamma: f64) -> Result<()> {
        for s in scenes {
            let features = model.encode_image(&s.image)?;
            for inst in &s.instances {
                let f = pool_query(model, &features, inst.bbox, gamma)?;
                self.add(inst.entry_id, f.as_slice().expect("contiguous"))?;
            }
        }
        Ok(())
    }

    /// Reads a JSON list of exemplar records and adds one query for each.
    pub fn ingest_exemplars(&mut self, model: &Model, path: &Path, gamma: f64) -> Result<usize> {
        let records: Vec<ExemplarRecord> = read_json(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        for r in &records {
            let category = self.category_index(&r.category)?;
            let image_path = if r.image_path.is_absolute() {
                r.image_path.clone()
            } else {
                root.join(&r.image_path)
            };
            let image = Raster::read_ppm(&image_path)?;
            let w = image.width as f64;
            let h = image.height as f64;
            let b = [
                r.bbox[0].clamp(0.0, w),
                r.bbox[1].clamp(0.0, h),
                r.bbox[2].clamp(0.0, w),
                r.bbox[3].clamp(0.0, h),
            ];
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(Error::Argument(format!(
                    "exemplar box {:?} in {} is empty after clipping",
                    r.bbox,
                    image_path.display()
                )));
            }
            let f = extract_query(model, &image, b, gamma)?;
            self.add(category, f.as_slice().expect("contiguous"))?;
        }
        Ok(records.len())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, list) in self.entries.iter().enumerate() {
            let mut bytes = Vec::with_capacity(list.len() * self.d * 4);
            for f in list {
                for v in f {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            let path = dir.join(category_file(i));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = BankManifest {
            format_version: BANK_FORMAT_VERSION,
            d: self.d,
            capacity: self.capacity,
            categories: self
                .categories
                .iter()
                .zip(&self.entries)
                .map(|(name, l)| CategoryEntry {
                    name: name.clone(),
                    count: l.len(),
                })
                .collect(),
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BankManifest = read_json(&dir.join(MANIFEST))?;
        if manifest.format_version != BANK_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "bank format {} is not supported (expected {BANK_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let names = manifest.categories.iter().map(|c| c.name.clone()).collect();
        let mut bank = Self::new(manifest.d, manifest.capacity, names)?;
        for (i, cat) in manifest.categories.iter().enumerate() {
            if cat.count > bank.capacity {
                return Err(Error::Format(format!("category `{}` exceeds capacity", cat.name)));
            }
            let path = dir.join(category_file(i));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let values = read_f32_le(&bytes)?;
            if values.len() != cat.count * bank.d {
                return Err(Error::Format(format!(
                    "{} holds {} values, manifest implies {}",
                    path.display(),
                    values.len(),
                    cat.count * bank.d
                )));
            }
            bank.entries[i] = values.chunks(bank.d).map(<[f32]>::to_vec).collect();
        }
        Ok(bank)
    }
}

fn category_file(index: usize) -> String {
    format!("category_{index}.f32")
}

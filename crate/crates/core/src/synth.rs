//! Synthetic detection scenes with controllable text ambiguity.
//!
//! Every vocabulary entry pairs a text name with a visual class (shape,
//! fill and size band). Entries that share a text name form an ambiguity
//! group: a text-only detector sees one token for all of them, while their
//! rasters remain distinct.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::box_iou;
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Solid,
    Striped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBand {
    Small,
    Large,
}

impl SizeBand {
    /// Inclusive side-length range in pixels.
    pub fn side_range(self) -> (usize, usize) {
        match self {
            SizeBand::Small => (10, 14),
            SizeBand::Large => (18, 26),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VisualClass {
    pub shape: Shape,
    pub fill: Fill,
    pub size: SizeBand,
}

impl VisualClass {
    pub fn new(shape: Shape, fill: Fill, size: SizeBand) -> Self {
        Self { shape, fill, size }
    }

    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.shape.name(), self.fill.name(), self.size.name())
    }

    /// Whether pixel `(x, y)` is painted for a shape whose square footprint
    /// starts at `(x0, y0)` with side `side`.
    fn covers(&self, x: usize, y: usize, x0: usize, y0: usize, side: usize) -> bool {
        if x < x0 || y < y0 || x >= x0 + side || y >= y0 + side {
            return false;
        }
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let s = side as f64;
        let (cx, cy) = (x0 as f64 + s / 2.0, y0 as f64 + s / 2.0);
        let inside = match self.shape {
            Shape::Square => true,
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= (s / 2.0).powi(2),
            Shape::Triangle => (px - cx).abs() <= (py - y0 as f64) / 2.0,
        };
        let painted = match self.fill {
            Fill::Solid => true,
            Fill::Striped => ((y - y0) / 2).is_multiple_of(2),
        };
        inside && painted
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Fill {
    pub fn name(self) -> &'static str {
        match self {
            Fill::Solid => "solid",
            Fill::Striped => "striped",
        }
    }
}

impl SizeBand {
    pub fn name(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub text_name: String,
    pub visual_class: VisualClass,
    /// Held-out entries never appear in pre-training scenes.
    #[serde(default)]
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub entries: Vec<VocabEntry>,
}

impl VocabSpec {
    /// Eight entries: two plain, two 2-way ambiguity groups, two held out.
    pub fn default_ambiguous() -> Self {
        use Fill::*;
        use Shape::*;
        use SizeBand::*;
        let e = |name: &str, shape, fill, size, held_out| VocabEntry {
            text_name: name.into(),
            visual_class: VisualClass::new(shape, fill, size),
            held_out,
        };
        Self {
            entries: vec![
                e("ball", Circle, Solid, Small, false),
                e("block", Square, Solid, Small, false),
                e("bat", Circle, Striped, Large, false),
                e("bat", Triangle, Solid, Large, false),
                e("crane", Square, Solid, Large, false),
                e("crane", Triangle, Striped, Large, false),
                e("kite", Square, Striped, Large, true),
                e("ring", Circle, Solid, Large, true),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Argument("vocabulary has no entries".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.visual_class) {
                return Err(Error::Argument(format!(
                    "visual class {} appears twice",
                    e.visual_class.label()
                )));
            }
        }
        for group in self.ambiguity_groups() {
            for (n, &i) in group.iter().enumerate() {
                for &j in &group[n + 1..] {
                    let (a, b) = (&self.entries[i].visual_class, &self.entries[j].visual_class);
                    let l1 = canonical_render(a, CANONICAL_SIZE).mean_abs_diff(&canonical_render(b, CANONICAL_SIZE));
                    if l1 <= MIN_AMBIGUOUS_L1 {
                        return Err(Error::Argument(format!(
                            "`{}` and `{}` share a name but render almost identically (L1 {l1:.4})",
                            a.label(),
                            b.label()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct text names in first-appearance order.
    pub fn text_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.text_name) {
                out.push(e.text_name.clone());
            }
        }
        out
    }

    /// Unique per-entry category keys (the visual-class labels).
    pub fn category_keys(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.visual_class.label()).collect()
    }

    /// Groups of two or more entries sharing a text name.
    pub fn ambiguity_groups(&self) -> Vec<Vec<usize>> {
        let mut by_name: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            by_name.entry(&e.text_name).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_name.into_values().filter(|g| g.len() >= 2).collect();
        groups.sort();
        groups
    }

    pub fn ambiguous_entries(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.ambiguity_groups().concat();
        v.sort_unstable();
        v
    }

    pub fn base_entries(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.entries[i].held_out).collect()
    }

    pub fn held_out_entries(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].held_out).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Fewshot,
    Eval,
    EvalNovel,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Fewshot, Split::Eval, Split::EvalNovel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Fewshot => "fewshot",
            Split::Eval => "eval",
            Split::EvalNovel => "eval_novel",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub entry_id: usize,
    /// Tight pixel box `(x1, y1, x2, y2)`, exclusive on the far edges.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub split: Split,
    pub image: Raster,
    pub instances: Vec<SceneInstance>,
}

pub const MAX_INSTANCES: usize = 4;
pub const MAX_PAIR_IOU: f64 = 0.1;
pub const NOISE_SIGMA: f64 = 0.05;
/// Classes sharing a text name must differ by more than this mean per-pixel
/// L1 between their canonical renders.
pub const MIN_AMBIGUOUS_L1: f64 = 0.05;
const CANONICAL_SIZE: usize = 64;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Per-scene seed derived from the global seed and the scene id.
pub fn scene_seed(global: u64, scene_id: u64) -> u64 {
    splitmix64(global ^ splitmix64(scene_id.wrapping_add(0x5151_5151)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Paints one shape and returns the tight box of the painted pixels.
pub fn paint(image: &mut Raster, class: &VisualClass, x0: usize, y0: usize, side: usize, color: [f32; 3]) -> [f64; 4] {
    let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..(y0 + side).min(image.height) {
        for x in x0..(x0 + side).min(image.width) {
            if class.covers(x, y, x0, y0, side) {
                image.set(x, y, color);
                minx = minx.min(x);
                miny = miny.min(y);
                maxx = maxx.max(x);
                maxy = maxy.max(y);
            }
        }
    }
    [minx as f64, miny as f64, (maxx + 1) as f64, (maxy + 1) as f64]
}

/// The class drawn alone in white at the middle of its size band, centred
/// on a black canvas.
pub fn canonical_render(class: &VisualClass, image_size: usize) -> Raster {
    let (lo, hi) = class.size.side_range();
    let side = (lo + hi) / 2;
    let mut img = Raster::filled(image_size, image_size, 0.0);
    let o = (image_size - side) / 2;
    paint(&mut img, class, o, o, side, [1.0; 3]);
    img
}

/// Draws one scene with instances of the `allowed` entries.
///
/// `forced_count` fixes the number of instances to attempt; otherwise it is
/// uniform in `1..=4`. Instances that cannot be placed within the IoU limit
/// after 100 attempts are dropped (the first one always fits).
pub fn generate_scene<R: Rng>(
    rng: &mut R,
    vocab: &VocabSpec,
    allowed: &[usize],
    image_size: usize,
    forced_count: Option<usize>,
) -> Result<SceneSample> {
    if vocab.is_empty() || allowed.is_empty() {
        return Err(Error::Argument("scene generation needs at least one entry".into()));
    }
    if let Some(&bad) = allowed.iter().find(|&&e| e >= vocab.len()) {
        return Err(Error::Argument(format!("entry {bad} not in vocabulary")));
    }
    let count = forced_count.unwrap_or_else(|| rng.gen_range(1..=MAX_INSTANCES));

    let base = rng.gen_range(0.05..0.25f32);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("finite sigma");
    let mut image = Raster::filled(image_size, image_size, 0.0);
    for v in &mut image.data {
        *v = base + noise.sample(rng) as f32;
    }

    let mut placed: Vec<(usize, [f64; 4], usize, usize, usize)> = Vec::new();
    'instances: for _ in 0..count {
        let entry = allowed[rng.gen_range(0..allowed.len())];
        let class = vocab.entries[entry].visual_class;
        let (lo, hi) = class.size.side_range();
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.gen_range(lo..=hi).min(image_size);
            let x0 = rng.gen_range(0..=image_size - side);
            let y0 = rng.gen_range(0..=image_size - side);
            let footprint = [x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64];
            if placed.iter().all(|p| box_iou(&p.1, &footprint) <= MAX_PAIR_IOU) {
                placed.push((entry, footprint, x0, y0, side));
                continue 'instances;
            }
        }
        break;
    }

    let mut instances = Vec::with_capacity(placed.len());
    for (entry, _, x0, y0, side) in placed {
        let color = [
            rng.gen_range(0.55..0.95f32),
            rng.gen_range(0.55..0.95f32),
            rng.gen_range(0.55..0.95f32),
        ];
        let class = vocab.entries[entry].visual_class;
        let bbox = paint(&mut image, &class, x0, y0, side, color);
        instances.push(SceneInstance { entry_id: entry, bbox });
    }
    image.quantize();
    Ok(SceneSample {
        scene_id: 0,
        split: Split::Pretrain,
        image,
        instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub fewshot: usize,
    pub eval: usize,
    pub eval_novel: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            fewshot: 24,
            eval: 200,
            eval_novel: 100,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::Fewshot => self.fewshot,
            Split::Eval => self.eval,
            Split::EvalNovel => self.eval_novel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: VocabSpec,
    pub image_size: usize,
    pub scenes: Vec<SceneSample>,
}

/// Per-split instance counts by entry id.
pub type Histogram = BTreeMap<String, Vec<usize>>;

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneSample> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn split_scenes(&self, split: Split) -> Vec<SceneSample> {
        self.split(split).cloned().collect()
    }

    pub fn histogram(&self) -> Histogram {
        let mut h = Histogram::new();
        for split in Split::ALL {
            let mut counts = vec![0; self.vocab.len()];
            for s in self.split(split) {
                for i in &s.instances {
                    counts[i.entry_id] += 1;
                }
            }
            h.insert(split.name().to_string(), counts);
        }
        h
    }

    /// Writes `{scene_id}.ppm` images, `annotations.json` and `vocab.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::with_capacity(self.scenes.len());
        for s in &self.scenes {
            s.image.write_ppm(&dir.join(format!("{}.ppm", s.scene_id)))?;
            records.push(AnnotationRecord {
                scene_id: s.scene_id,
                split: s.split,
                instances: s.instances.clone(),
            });
        }
        write_json(&dir.join("annotations.json"), &records)?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        write_json(&dir.join("histogram.json"), &self.histogram())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let vocab: VocabSpec = read_json(&dir.join("vocab.json"))?;
        vocab.validate()?;
        let records: Vec<AnnotationRecord> = read_json(&dir.join("annotations.json"))?;
        let mut scenes = Vec::with_capacity(records.len());
        let mut image_size = 0;
        for r in records {
            let image = Raster::read_ppm(&dir.join(format!("{}.ppm", r.scene_id)))?;
            image_size = image.width;
            if let Some(bad) = r.instances.iter().find(|i| i.entry_id >= vocab.len()) {
                return Err(Error::Format(format!(
                    "scene {} references unknown entry {}",
                    r.scene_id, bad.entry_id
                )));
            }
            scenes.push(SceneSample {
                scene_id: r.scene_id,
                split: r.split,
                image,
                instances: r.instances,
            });
        }
        Ok(Self {
            vocab,
            image_size,
            scenes,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub scene_id: u64,
    pub split: Split,
    pub instances: Vec<SceneInstance>,
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Scene ids run consecutively over the splits in `Split::ALL` order.
/// Pre-training, evaluation and few-shot scenes draw from the base
/// entries (few-shot from every entry); novel evaluation scenes draw only
/// from held-out entries. Generation is split across `workers` threads and
/// reassembled in scene-id order.
pub fn generate_dataset(
    seed: u64,
    vocab: &VocabSpec,
    sizes: &SplitSizes,
    image_size: usize,
    workers: usize,
) -> Result<Dataset> {
    vocab.validate()?;
    let base = vocab.base_entries();
    let held = vocab.held_out_entries();
    let all: Vec<usize> = (0..vocab.len()).collect();
    let mut jobs: Vec<(u64, Split, Vec<usize>)> = Vec::new();
    let mut next_id = 0u64;
    for split in Split::ALL {
        let allowed = match split {
            Split::Pretrain | Split::Eval => base.clone(),
            Split::Fewshot => all.clone(),
            Split::EvalNovel => held.clone(),
        };
        let n = sizes.get(split);
        if n > 0 && allowed.is_empty() {
            return Err(Error::Generation(format!(
                "split {} requested but has no eligible entries",
                split.name()
            )));
        }
        for _ in 0..n {
            jobs.push((next_id, split, allowed.clone()));
            next_id += 1;
        }
    }

    let run = |job: &(u64, Split, Vec<usize>)| -> Result<SceneSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, job.0));
        let mut s = generate_scene(&mut rng, vocab, &job.2, image_size, None)?;
        s.scene_id = job.0;
        s.split = job.1;
        Ok(s)
    };
    let workers = workers.max(1).min(jobs.len().max(1));
    let scenes: Vec<SceneSample> = if workers == 1 {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunk = jobs.len().div_ceil(workers);
        let parts: Vec<Result<Vec<SceneSample>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| scope.spawn(move || c.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(jobs.len());
        for p in parts {
            out.extend(p?);
        }
        out
    };

    let dataset = Dataset {
        vocab: vocab.clone(),
        image_size,
        scenes,
    };
    for s in dataset.split(Split::Pretrain) {
        if let Some(i) = s.instances.iter().find(|i| vocab.entries[i.entry_id].held_out) {
            return Err(Error::Generation(format!(
                "held-out entry {} leaked into pre-training scene {}",
                i.entry_id, s.scene_id
            )));
        }
    }
    for (split, counts) in dataset.histogram() {
        log::info!("{split}: {counts:?}");
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_identical_ambiguous_pair_is_rejected() {
        let e = |shape, fill| VocabEntry {
            text_name: "crane".into(),
            visual_class: VisualClass::new(shape, fill, SizeBand::Large),
            held_out: false,
        };
        let close = VocabSpec {
            entries: vec![e(Shape::Square, Fill::Striped), e(Shape::Triangle, Fill::Striped)],
        };
        assert!(matches!(close.validate(), Err(Error::Argument(_))));
        let apart = VocabSpec {
            entries: vec![e(Shape::Square, Fill::Solid), e(Shape::Triangle, Fill::Striped)],
        };
        apart.validate().unwrap();
    }

    #[test]
    fn labels_are_unique_in_default_vocab() {
        let v = VocabSpec::default_ambiguous();
        v.validate().unwrap();
        let keys = v.category_keys();
        assert_eq!(keys[0], "circle-solid-small");
        assert_eq!(v.ambiguity_groups(), vec![vec![2, 3], vec![4, 5]]);
        assert_eq!(v.held_out_entries(), vec![6, 7]);
        assert_eq!(v.text_names(), vec!["ball", "block", "bat", "crane", "kite", "ring"]);
    }

    #[test]
    fn duplicate_visual_class_rejected() {
        let mut v = VocabSpec::default_ambiguous();
        v.entries[1].visual_class = v.entries[0].visual_class;
        assert!(v.validate().is_err());
    }

    #[test]
    fn forced_single_instance_has_the_only_class() {
        let vocab = VocabSpec {
            entries: vec![VocabEntry {
                text_name: "ball".into(),
                visual_class: VisualClass::new(Shape::Circle, Fill::Solid, SizeBand::Large),
                held_out: false,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_scene(&mut rng, &vocab, &[0], 64, Some(1)).unwrap();
        assert_eq!(s.instances.len(), 1);
        assert_eq!(s.instances[0].entry_id, 0);
    }

    #[test]
    fn empty_allowed_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = VocabSpec::default_ambiguous();
        assert!(generate_scene(&mut rng, &v, &[], 64, None).is_err());
    }

    #[test]
    fn crowded_requests_shrink_instead_of_failing() {
        let v = VocabSpec::default_ambiguous();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = generate_scene(&mut rng, &v, &[2], 32, Some(4)).unwrap();
        assert!(!s.instances.is_empty() && s.instances.len() < 4);
    }

    #[test]
    fn striped_triangle_covers_expected_rows() {
        let c = VisualClass::new(Shape::Triangle, Fill::Striped, SizeBand::Small);
        // rows 0,1 painted, 2,3 empty, 4,5 painted ...
        assert!(c.covers(5, 1, 0, 0, 10));
        assert!(!c.covers(5, 2, 0, 0, 10));
        assert!(c.covers(5, 4, 0, 0, 10));
        assert!(!c.covers(0, 1, 0, 0, 10));
    }
}

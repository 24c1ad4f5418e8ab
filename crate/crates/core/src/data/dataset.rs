//! Synthetic one-shot detection benchmark: generation, files and loading.
//!
//! Every sample draws from its own generator stream derived from
//! `(seed, split, index)`, so the dataset does not depend on generation order
//! or worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::glyph::{hsv_to_rgb, render_glyph, GlyphFamily, GlyphStyle};
use super::image::{read_ppm, write_ppm, RgbImage};
use crate::detector::{iou, BBox};
use crate::error::{CatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSplit {
    Seen,
    Unseen,
}

/// Which partition of the benchmark a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSplit {
    /// Training targets; seen classes only.
    Train,
    /// Held-out targets of seen classes.
    Seen,
    /// Targets of unseen classes.
    Unseen,
}

impl SampleSplit {
    pub const ALL: [SampleSplit; 3] = [SampleSplit::Train, SampleSplit::Seen, SampleSplit::Unseen];

    pub fn class_split(self) -> ClassSplit {
        match self {
            SampleSplit::Train | SampleSplit::Seen => ClassSplit::Seen,
            SampleSplit::Unseen => ClassSplit::Unseen,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleSplit::Train => "train",
            SampleSplit::Seen => "seen",
            SampleSplit::Unseen => "unseen",
        }
    }

    fn code(self) -> u64 {
        match self {
            SampleSplit::Train => 1,
            SampleSplit::Seen => 2,
            SampleSplit::Unseen => 3,
        }
    }
}

impl std::str::FromStr for SampleSplit {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SampleSplit::Train),
            "seen" => Ok(SampleSplit::Seen),
            "unseen" => Ok(SampleSplit::Unseen),
            other => Err(CatError::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphClass {
    pub id: usize,
    pub family: GlyphFamily,
    /// Base hue in `[0, 1)`; instances jitter around it.
    pub hue: f64,
    pub split: ClassSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_seen_classes: usize,
    pub n_unseen_classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub image_size: usize,
    pub query_size: usize,
    pub min_glyph: f64,
    pub max_glyph: f64,
    pub max_query_instances: usize,
    pub max_distractors: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_seen_classes: 12,
            n_unseen_classes: 4,
            train_samples: 960,
            eval_samples: 120,
            image_size: 208,
            query_size: 64,
            min_glyph: 28.0,
            max_glyph: 56.0,
            max_query_instances: 3,
            max_distractors: 4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen_classes == 0 || self.n_unseen_classes == 0 {
            return Err(CatError::config("need at least one seen and one unseen class"));
        }
        if self.n_seen_classes + self.n_unseen_classes > GlyphFamily::ALL.len() {
            return Err(CatError::config(format!(
                "at most {} classes are available",
                GlyphFamily::ALL.len()
            )));
        }
        if self.image_size < 32 || self.query_size < 32 {
            return Err(CatError::config("image and query sizes must be at least 32"));
        }
        if !(self.min_glyph >= 4.0 && self.max_glyph >= self.min_glyph) {
            return Err(CatError::config("glyph size range is invalid"));
        }
        if self.max_glyph * std::f64::consts::SQRT_2 >= self.image_size as f64 {
            return Err(CatError::config("glyphs do not fit in the image"));
        }
        if self.max_query_instances == 0 {
            return Err(CatError::config("samples need at least one query-class instance"));
        }
        Ok(())
    }

    pub fn samples_in(&self, split: SampleSplit) -> usize {
        match split {
            SampleSplit::Train => self.train_samples,
            SampleSplit::Seen | SampleSplit::Unseen => self.eval_samples,
        }
    }
}

/// Class table: ids `0..n`, unseen ids spread evenly (the last of every
/// `n / n_unseen` block), hues evenly spaced around the color wheel.
pub fn make_classes(n_seen: usize, n_unseen: usize) -> Vec<GlyphClass> {
    let total = n_seen + n_unseen;
    let unseen: BTreeSet<usize> = (0..n_unseen).map(|k| (k + 1) * total / n_unseen - 1).collect();
    (0..total)
        .map(|id| GlyphClass {
            id,
            family: GlyphFamily::ALL[id],
            hue: id as f64 / total as f64,
            split: if unseen.contains(&id) {
                ClassSplit::Unseen
            } else {
                ClassSplit::Seen
            },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One target image, its query patch and the annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotSample {
    pub id: String,
    pub index: usize,
    pub split: SampleSplit,
    pub target: RgbImage,
    pub query: RgbImage,
    pub query_class: usize,
    /// Boxes of the query class in the target.
    pub boxes: Vec<BBox>,
    /// Every rendered instance, distractors included.
    pub instances: Vec<Instance>,
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub index: usize,
    pub split: SampleSplit,
    pub image: String,
    pub query: String,
    pub query_class: usize,
    pub boxes: Vec<BBox>,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: DatasetConfig,
    /// Relative path to lowercase hex SHA-256, for every data file.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FORMAT: &str = "cat-glyphs/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub classes: Vec<GlyphClass>,
    pub samples: Vec<OneShotSample>,
}

impl Dataset {
    pub fn split(&self, split: SampleSplit) -> impl Iterator<Item = &OneShotSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn class(&self, id: usize) -> Option<&GlyphClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn class_ids(&self, split: ClassSplit) -> Vec<usize> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    /// Seen and unseen classes must be disjoint and every sample must use
    /// only classes of its split.
    pub fn check_splits(&self) -> Result<()> {
        let seen: BTreeSet<usize> = self.class_ids(ClassSplit::Seen).into_iter().collect();
        let unseen: BTreeSet<usize> = self.class_ids(ClassSplit::Unseen).into_iter().collect();
        if !seen.is_disjoint(&unseen) || seen.len() + unseen.len() != self.classes.len() {
            return Err(CatError::data("seen and unseen class sets overlap"));
        }
        for s in &self.samples {
            let allowed = match s.split.class_split() {
                ClassSplit::Seen => &seen,
                ClassSplit::Unseen => &unseen,
            };
            if !allowed.contains(&s.query_class) || s.instances.iter().any(|i| !allowed.contains(&i.class)) {
                return Err(CatError::data(format!(
                    "sample {} uses a class outside its split",
                    s.id
                )));
            }
            if s.boxes.is_empty() {
                return Err(CatError::data(format!("sample {} has no ground-truth box", s.id)));
            }
        }
        Ok(())
    }
}

fn sample_rng(seed: u64, split: SampleSplit, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 40) | index as u64);
    rng
}

fn jittered_style<R: Rng>(class: &GlyphClass, size: f64, rng: &mut R) -> GlyphStyle {
    let hue = class.hue + rng.gen_range(-0.012..0.012);
    GlyphStyle {
        family: class.family,
        size,
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        color: hsv_to_rgb(hue, rng.gen_range(0.7..1.0), rng.gen_range(0.75..1.0)),
    }
}

fn background<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let base = rng.gen_range(0.05..0.22);
    let tint: [f64; 3] = [
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
    ];
    vec![[base + tint[0], base + tint[1], base + tint[2]]; n]
}

fn add_noise<R: Rng>(canvas: &mut [[f64; 3]], amplitude: f64, rng: &mut R) {
    for px in canvas.iter_mut() {
        for c in px.iter_mut() {
            *c += rng.gen_range(-amplitude..amplitude);
        }
    }
}

const PLACEMENT_TRIES: usize = 60;

/// Try to render one target; `None` means placement failed and the caller
/// should start over with fresh randomness.
fn try_target<R: Rng>(
    cfg: &DatasetConfig,
    classes: &[&GlyphClass],
    query: &GlyphClass,
    rng: &mut R,
) -> Option<(RgbImage, Vec<Instance>)> {
    let n = cfg.image_size;
    let n_query = rng.gen_range(1..=cfg.max_query_instances);
    let others: Vec<&&GlyphClass> = classes.iter().filter(|c| c.id != query.id).collect();
    let n_distract = if others.is_empty() {
        0
    } else {
        rng.gen_range(0..=cfg.max_distractors)
    };
    let mut plan: Vec<&GlyphClass> = vec![query; n_query];
    for _ in 0..n_distract {
        plan.push(others[rng.gen_range(0..others.len())]);
    }
    let mut canvas = background(n * n, rng);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut instances = Vec::new();
    for class in plan {
        let size = rng.gen_range(cfg.min_glyph..=cfg.max_glyph);
        let style = jittered_style(class, size, rng);
        let r = style.footprint_radius();
        let mut spot = None;
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.gen_range(r..n as f64 - r);
            let cy = rng.gen_range(r..n as f64 - r);
            if placed.iter().all(|&(x, y, pr)| (x - cx).hypot(y - cy) > r + pr + 2.0) {
                spot = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = spot?;
        let bbox = render_glyph(&mut canvas, n, n, cx, cy, &style)?;
        placed.push((cx, cy, r));
        instances.push(Instance { class: class.id, bbox });
    }
    add_noise(&mut canvas, 0.04, rng);
    Some((RgbImage::from_rgb_f64(n, n, &canvas), instances))
}

fn render_query<R: Rng>(cfg: &DatasetConfig, class: &GlyphClass, rng: &mut R) -> RgbImage {
    let n = cfg.query_size;
    let mut canvas = background(n * n, rng);
    // the glyph's rotated footprint must fit inside the patch
    let max_size = cfg.max_glyph.min(n as f64 * 0.62);
    let size = rng.gen_range(cfg.min_glyph.min(max_size)..=max_size);
    let style = jittered_style(class, size, rng);
    let slack = (n as f64 / 2.0 - style.footprint_radius()).max(0.0);
    let cx = n as f64 / 2.0 + rng.gen_range(-slack..=slack) * 0.5;
    let cy = n as f64 / 2.0 + rng.gen_range(-slack..=slack) * 0.5;
    render_glyph(&mut canvas, n, n, cx, cy, &style);
    add_noise(&mut canvas, 0.04, rng);
    RgbImage::from_rgb_f64(n, n, &canvas)
}

fn generate_sample(cfg: &DatasetConfig, classes: &[GlyphClass], split: SampleSplit, index: usize) -> OneShotSample {
    let pool: Vec<&GlyphClass> = classes.iter().filter(|c| c.split == split.class_split()).collect();
    // classes cycle so every split is balanced
    let query = pool[index % pool.len()];
    let mut rng = sample_rng(cfg.seed, split, index);
    let (target, instances) = loop {
        if let Some(t) = try_target(cfg, &pool, query, &mut rng) {
            break t;
        }
    };
    let query_img = render_query(cfg, query, &mut rng);
    let boxes = instances
        .iter()
        .filter(|i| i.class == query.id)
        .map(|i| i.bbox)
        .collect();
    OneShotSample {
        id: format!("{}_{:05}", split.name(), index),
        index,
        split,
        target,
        query: query_img,
        query_class: query.id,
        boxes,
        instances,
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let classes = make_classes(cfg.n_seen_classes, cfg.n_unseen_classes);
    let jobs: Vec<(SampleSplit, usize)> = SampleSplit::ALL
        .iter()
        .flat_map(|&s| (0..cfg.samples_in(s)).map(move |i| (s, i)))
        .collect();
    let samples: Vec<OneShotSample> = jobs
        .par_iter()
        .map(|&(s, i)| generate_sample(cfg, &classes, s, i))
        .collect();
    let ds = Dataset {
        config: cfg.clone(),
        classes,
        samples,
    };
    ds.check_splits()?;
    Ok(ds)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Write the dataset directory. Returns the manifest's SHA-256.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<String> {
    fs::create_dir_all(root)?;
    let mut files = BTreeMap::new();
    let mut annotations = Vec::new();
    for s in &ds.samples {
        let image = format!("images/{}.ppm", s.id);
        let query = format!("queries/{}.ppm", s.id);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &s.target)?;
        write_file(root, &image, &buf, &mut files)?;
        buf.clear();
        write_ppm(&mut buf, &s.query)?;
        write_file(root, &query, &buf, &mut files)?;
        let rec = AnnotationRecord {
            id: s.id.clone(),
            index: s.index,
            split: s.split,
            image,
            query,
            query_class: s.query_class,
            boxes: s.boxes.clone(),
            instances: s.instances.clone(),
        };
        serde_json::to_writer(&mut annotations, &rec)?;
        annotations.push(b'\n');
    }
    write_file(root, "annotations.jsonl", &annotations, &mut files)?;
    let classes = serde_json::to_vec_pretty(&ds.classes)?;
    write_file(root, "classes.json", &classes, &mut files)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        config: ds.config.clone(),
        files,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    let mut w = BufWriter::new(fs::File::create(root.join("manifest.json"))?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(sha256_hex(&bytes))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let bytes = fs::read(root.join("manifest.json"))
        .map_err(|e| CatError::data(format!("cannot read manifest in {}: {e}", root.display())))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format != MANIFEST_FORMAT {
        return Err(CatError::data(format!("unsupported dataset format {:?}", m.format)));
    }
    Ok(m)
}

/// SHA-256 of the manifest file.
pub fn manifest_hash(root: &Path) -> Result<String> {
    file_sha256(&root.join("manifest.json"))
}

/// Load a dataset directory, verifying every checksum and the class splits.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let verified = |rel: &str| -> Result<Vec<u8>> {
        let want = manifest
            .files
            .get(rel)
            .ok_or_else(|| CatError::data(format!("{rel} is not listed in the manifest")))?;
        let bytes = fs::read(root.join(rel)).map_err(|e| CatError::data(format!("cannot read {rel}: {e}")))?;
        if &sha256_hex(&bytes) != want {
            return Err(CatError::data(format!("checksum mismatch for {rel}")));
        }
        Ok(bytes)
    };
    let classes: Vec<GlyphClass> = serde_json::from_slice(&verified("classes.json")?)?;
    let ann = verified("annotations.jsonl")?;
    let text = std::str::from_utf8(&ann).map_err(|_| CatError::data("annotations are not UTF-8"))?;
    let mut samples = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: AnnotationRecord = serde_json::from_str(line)?;
        let target = read_ppm(BufReader::new(&verified(&rec.image)?[..]))?;
        let query = read_ppm(BufReader::new(&verified(&rec.query)?[..]))?;
        samples.push(OneShotSample {
            id: rec.id,
            index: rec.index,
            split: rec.split,
            target,
            query,
            query_class: rec.query_class,
            boxes: rec.boxes,
            instances: rec.instances,
        });
    }
    let ds = Dataset {
        config: manifest.config,
        classes,
        samples,
    };
    ds.check_splits()?;
    Ok(ds)
}

/// True when no two instances of a sample overlap.
pub fn instances_disjoint(s: &OneShotSample) -> bool {
    s.instances
        .iter()
        .enumerate()
        .all(|(i, a)| s.instances[i + 1..].iter().all(|b| iou(&a.bbox, &b.bbox) == 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 5,
            train_samples: 12,
            eval_samples: 8,
            image_size: 96,
            query_size: 48,
            min_glyph: 16.0,
            max_glyph: 24.0,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn default_split_is_twelve_four() {
        let classes = make_classes(12, 4);
        let unseen: Vec<usize> = classes
            .iter()
            .filter(|c| c.split == ClassSplit::Unseen)
            .map(|c| c.id)
            .collect();
        assert_eq!(unseen, vec![3, 7, 11, 15]);
        assert_eq!(classes.len() - unseen.len(), 12);
    }

    #[test]
    fn samples_respect_invariants() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!(ds.samples.len(), 12 + 8 + 8);
        for s in &ds.samples {
            assert!(!s.boxes.is_empty() && s.boxes.len() <= 3);
            assert!(s.instances.len() <= 3 + 4);
            assert!(instances_disjoint(s));
            for b in &s.boxes {
                assert!(b.is_valid() && b.within(96.0, 96.0));
            }
        }
    }

    #[test]
    fn independent_of_thread_count() {
        let cfg = small();
        let a = generate_dataset(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate_dataset(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn write_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small()).unwrap();
        let h1 = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(h1, manifest_hash(dir.path()).unwrap());
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let victim = dir.path().join("images/train_00003.ppm");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(CatError::Data(_))));
    }

    #[test]
    fn leakage_is_detected() {
        let mut ds = generate_dataset(&small()).unwrap();
        let unseen = ds.class_ids(ClassSplit::Unseen)[0];
        let s = ds.samples.iter_mut().find(|s| s.split == SampleSplit::Train).unwrap();
        s.instances.push(Instance {
            class: unseen,
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
        });
        assert!(ds.check_splits().is_err());
    }
}

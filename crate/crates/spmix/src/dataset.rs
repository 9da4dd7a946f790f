//! Manifest handling, long-tailed split construction, Many/Medium/Few
//! partitioning, and the synthetic desk-scale dataset generator.
//!
//! Manifest format: one record per line, `relative/path<TAB>class_name`,
//! UTF-8, LF endings. Class ids are assigned by sorted class name.

use crate::error::{Result, SpmixError};
use crate::imaging::{save_image, ImageTensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (path, _) in &entries {
            if !seen.insert(path.as_str()) {
                return Err(SpmixError::config(format!(
                    "duplicate path in manifest: {path}"
                )));
            }
        }
        if entries.is_empty() {
            return Err(SpmixError::config("manifest has no records"));
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class names sorted lexicographically; the index in this list is the
    /// contiguous class id.
    pub fn class_names(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> =
            self.entries.iter().map(|(_, c)| c.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let names = self.class_names();
        let mut counts = vec![0usize; names.len()];
        for (_, class) in &self.entries {
            let id = names.binary_search_by(|n| n.as_str().cmp(class)).unwrap();
            counts[id] += 1;
        }
        counts
    }

    /// Entry indices grouped per class id (order of appearance).
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let names = self.class_names();
        let mut groups = vec![Vec::new(); names.len()];
        for (i, (_, class)) in self.entries.iter().enumerate() {
            let id = names.binary_search_by(|n| n.as_str().cmp(class)).unwrap();
            groups[id].push(i);
        }
        groups
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| SpmixError::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((rel, class)) = line.split_once('\t') else {
                return Err(SpmixError::config(format!(
                    "{}:{}: expected 'path<TAB>class'",
                    path.display(),
                    lineno + 1
                )));
            };
            entries.push((rel.to_string(), class.to_string()));
        }
        Manifest::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (rel, class) in &self.entries {
            text.push_str(rel);
            text.push('\t');
            text.push_str(class);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| SpmixError::io(path, e))
    }
}

/// Train/val/test split at 7:1:2 with balanced val/test: the rarest class
/// caps the equal per-class counts, `n_test = floor(0.2 * min)`,
/// `n_val = floor(0.1 * min)`, each at least 1; the remainder (long-tailed)
/// becomes the train set. Deterministic for a given seed.
pub fn split_dataset(
    manifest: &Manifest,
    rng: &mut ChaCha8Rng,
) -> Result<(Manifest, Manifest, Manifest)> {
    let counts = manifest.class_counts();
    let names = manifest.class_names();
    let min = *counts.iter().min().expect("nonempty manifest");
    let n_test = ((min as f64 * 0.2).floor() as usize).max(1);
    let n_val = ((min as f64 * 0.1).floor() as usize).max(1);
    for (id, &count) in counts.iter().enumerate() {
        if count < n_test + n_val + 1 {
            return Err(SpmixError::config(format!(
                "class '{}' has only {count} samples; needs at least {} for {n_val} val + {n_test} test + 1 train",
                names[id],
                n_test + n_val + 1
            )));
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for group in manifest.by_class() {
        let mut indices = group;
        indices.shuffle(rng);
        for (pos, &idx) in indices.iter().enumerate() {
            let entry = manifest.entries[idx].clone();
            if pos < n_test {
                test.push(entry);
            } else if pos < n_test + n_val {
                val.push(entry);
            } else {
                train.push(entry);
            }
        }
    }
    Ok((Manifest::new(train)?, Manifest::new(val)?, Manifest::new(test)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Many,
    Medium,
    Few,
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Subset::Many => write!(f, "Many"),
            Subset::Medium => write!(f, "Medium"),
            Subset::Few => write!(f, "Few"),
        }
    }
}

/// Class id -> subset assignment derived from per-class counts.
#[derive(Clone, Debug)]
pub struct SubsetPartition {
    pub assignment: Vec<Subset>,
    pub many_min: usize,
    pub few_max: usize,
}

impl SubsetPartition {
    pub fn subset_of(&self, class: usize) -> Subset {
        self.assignment[class]
    }

    /// Head classes (mixup partner donors) are the Many subset.
    pub fn head_flags(&self) -> Vec<bool> {
        self.assignment
            .iter()
            .map(|s| matches!(s, Subset::Many))
            .collect()
    }
}

/// Many if count >= many_min, Few if count <= few_max, else Medium.
pub fn partition_subsets(
    manifest: &Manifest,
    many_min: usize,
    few_max: usize,
) -> Result<SubsetPartition> {
    if many_min <= few_max {
        return Err(SpmixError::config(format!(
            "many_min {many_min} must exceed few_max {few_max}"
        )));
    }
    let assignment = manifest
        .class_counts()
        .iter()
        .map(|&c| {
            if c >= many_min {
                Subset::Many
            } else if c <= few_max {
                Subset::Few
            } else {
                Subset::Medium
            }
        })
        .collect();
    Ok(SubsetPartition {
        assignment,
        many_min,
        few_max,
    })
}

/// Configuration for the synthetic long-tailed dataset. Every image is a
/// textured class-agnostic background plus one compact dark blob at a
/// random position; blob shape carries the class identity.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(counts: Vec<usize>, image_size: usize, seed: u64) -> Result<Self> {
        if counts.is_empty() || counts.iter().any(|&c| c == 0) {
            return Err(SpmixError::config("class counts must be positive"));
        }
        if image_size < 32 {
            return Err(SpmixError::config("synthetic images must be >= 32 px"));
        }
        Ok(SyntheticConfig {
            counts,
            image_size,
            seed,
        })
    }
}

/// Metadata for one generated sample (used by saliency checks).
#[derive(Clone, Debug)]
pub struct SampleMeta {
    pub rel_path: String,
    pub class: usize,
    /// Inclusive blob bounding box (y0, x0, y1, x1).
    pub blob_box: (usize, usize, usize, usize),
}

#[derive(Clone, Copy)]
enum BlobShape {
    Disk,
    Square,
    Cross,
    Ring,
    HollowSquare,
}

const SHAPES: [BlobShape; 5] = [
    BlobShape::Disk,
    BlobShape::Square,
    BlobShape::Cross,
    BlobShape::Ring,
    BlobShape::HollowSquare,
];

impl BlobShape {
    /// Coverage in [0,1] at offset (dy, dx) from the blob center with
    /// characteristic radius r; soft 1px edges via signed distance.
    fn coverage(&self, dy: f64, dx: f64, r: f64) -> f64 {
        let soft = |d: f64| (0.5 - d).clamp(0.0, 1.0);
        match self {
            BlobShape::Disk => soft((dy * dy + dx * dx).sqrt() - r),
            BlobShape::Square => soft(dy.abs().max(dx.abs()) - r),
            BlobShape::Cross => {
                let bar = 0.45 * r;
                let horiz = (dy.abs() - bar).max(dx.abs() - 1.3 * r);
                let vert = (dx.abs() - bar).max(dy.abs() - 1.3 * r);
                soft(horiz.min(vert))
            }
            BlobShape::Ring => {
                let rad = (dy * dy + dx * dx).sqrt();
                soft((rad - r).max(0.55 * r - rad))
            }
            BlobShape::HollowSquare => {
                let ch = dy.abs().max(dx.abs());
                soft((ch - r).max(0.55 * r - ch))
            }
        }
    }

    fn reach(&self, r: f64) -> f64 {
        match self {
            BlobShape::Cross => 1.3 * r,
            _ => r,
        }
    }
}

/// Smooth low-frequency value noise: a coarse random lattice bilinearly
/// upsampled, keeping center-surround responses low away from the blob.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize, amplitude: f64) -> Vec<f64> {
    let lattice: Vec<f64> = (0..cells * cells)
        .map(|_| rng.random_range(-amplitude..=amplitude))
        .collect();
    let mut out = vec![0.0; size * size];
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(cells - 1);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cells - 1);
            let tx = fx - x0 as f64;
            let top =
                lattice[y0 * cells + x0] + tx * (lattice[y0 * cells + x1] - lattice[y0 * cells + x0]);
            let bot =
                lattice[y1 * cells + x0] + tx * (lattice[y1 * cells + x1] - lattice[y1 * cells + x0]);
            out[y * size + x] = top + ty * (bot - top);
        }
    }
    out
}

/// Renders one synthetic sample; returns the image and the blob box.
fn render_sample(
    class: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, (usize, usize, usize, usize)) {
    let shape = SHAPES[class % SHAPES.len()];
    // skin-like background with a slight per-image tint
    let base = [
        0.86 + rng.random_range(-0.05..=0.05),
        0.72 + rng.random_range(-0.05..=0.05),
        0.63 + rng.random_range(-0.05..=0.05),
    ];
    let texture = smooth_noise(rng, size, 8, 0.04);
    // same dark-lesion palette for every class: shape is the only label signal
    let blob_rgb = [
        0.33 + rng.random_range(-0.04..=0.04),
        0.21 + rng.random_range(-0.03..=0.03),
        0.17 + rng.random_range(-0.03..=0.03),
    ];
    let r = rng.random_range(0.11..=0.16) * size as f64;
    let reach = shape.reach(r).ceil() as usize + 2;
    let cy = rng.random_range(reach..size - reach) as f64;
    let cx = rng.random_range(reach..size - reach) as f64;

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let cov = shape.coverage(y as f64 - cy, x as f64 - cx, r);
            let tex = texture[y * size + x];
            for c in 0..3 {
                let bg = (base[c] + tex).clamp(0.0, 1.0);
                data.push((bg + cov * (blob_rgb[c] - bg)).clamp(0.0, 1.0));
            }
        }
    }
    let img = ImageTensor::new(size, size, 3, data).expect("values clamped");
    let lo_y = (cy - shape.reach(r)).floor().max(0.0) as usize;
    let lo_x = (cx - shape.reach(r)).floor().max(0.0) as usize;
    let hi_y = ((cy + shape.reach(r)).ceil() as usize).min(size - 1);
    let hi_x = ((cx + shape.reach(r)).ceil() as usize).min(size - 1);
    (img, (lo_y, lo_x, hi_y, hi_x))
}

/// Writes the dataset under `out_dir` (`images/<class>/img_NNNN.png`) plus
/// `manifest.tsv`; returns the manifest and per-sample metadata.
/// Byte-identical output for a fixed seed.
pub fn generate_synthetic_lt(
    cfg: &SyntheticConfig,
    out_dir: &Path,
) -> Result<(Manifest, Vec<SampleMeta>)> {
    let image_dir = out_dir.join("images");
    let mut entries = Vec::new();
    let mut metas = Vec::new();
    for (class, &count) in cfg.counts.iter().enumerate() {
        let class_name = format!("c{class}");
        let class_dir = image_dir.join(&class_name);
        std::fs::create_dir_all(&class_dir).map_err(|e| SpmixError::io(&class_dir, e))?;
        for i in 0..count {
            // independent stream per sample keeps generation order-free
            let stream = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(((class as u64) << 32) | i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let (img, blob_box) = render_sample(class, cfg.image_size, &mut rng);
            let rel = format!("images/{class_name}/img_{i:04}.png");
            save_image(&img, &out_dir.join(&rel))?;
            entries.push((rel.clone(), class_name.clone()));
            metas.push(SampleMeta {
                rel_path: rel,
                class,
                blob_box,
            });
        }
    }
    let manifest = Manifest::new(entries)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok((manifest, metas))
}

/// In-memory dataset: decoded images resized to the encoder input size.
pub struct LoadedDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub by_class: Vec<Vec<usize>>,
}

impl LoadedDataset {
    pub fn load(manifest: &Manifest, root: &Path, input_size: usize) -> Result<Self> {
        let class_names = manifest.class_names();
        let mut images = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        for (rel, class) in manifest.entries() {
            let img = crate::imaging::load_image(&root.join(rel), Some(input_size))?
                .ensure_channels(3)?;
            images.push(img);
            labels.push(
                class_names
                    .binary_search_by(|n| n.as_str().cmp(class))
                    .map_err(|_| SpmixError::config(format!("unknown class '{class}'")))?,
            );
        }
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, &label) in labels.iter().enumerate() {
            by_class[label].push(i);
        }
        Ok(LoadedDataset {
            images,
            labels,
            class_names,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
}

/// Converts an ISIC-style one-hot label CSV (`image,MEL,NV,...`) into the
/// manifest format, appending `extension` to the image ids.
pub fn csv_to_manifest(csv_path: &Path, extension: &str) -> Result<Manifest> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| SpmixError::io(csv_path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SpmixError::config("empty label csv"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 {
        return Err(SpmixError::config("label csv needs image + class columns"));
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(SpmixError::config(format!(
                "{}:{}: field count mismatch",
                csv_path.display(),
                lineno + 2
            )));
        }
        let mut class = None;
        for (i, field) in fields.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                SpmixError::config(format!(
                    "{}:{}: non-numeric label field '{field}'",
                    csv_path.display(),
                    lineno + 2
                ))
            })?;
            if v == 1.0 {
                class = Some(columns[i].to_string());
            }
        }
        let class = class.ok_or_else(|| {
            SpmixError::config(format!(
                "{}:{}: no class column set to 1",
                csv_path.display(),
                lineno + 2
            ))
        })?;
        entries.push((format!("{}.{extension}", fields[0]), class));
    }
    Manifest::new(entries)
}

/// Per-class counts as a `name -> count` map, for logs.
pub fn count_summary(manifest: &Manifest) -> BTreeMap<String, usize> {
    manifest
        .class_names()
        .into_iter()
        .zip(manifest.class_counts())
        .collect()
}

/// Where split manifests land relative to an output directory.
pub fn split_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("train.tsv"),
        dir.join("val.tsv"),
        dir.join("test.tsv"),
    )
}

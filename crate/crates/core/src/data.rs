//! Synthetic auxiliary data, dataset manifests, and caption templating.
//!
//! Three shape families (squares, disks, bars) render on a gray background
//! with seeded jitter and pixel noise; abnormal samples get a small
//! contrasting blob whose exact footprint becomes the mask. Disjoint
//! family splits between train and test manifests give a desk-scale
//! stand-in for the cross-category protocol.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pgm::save_pgm;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.35;
const FOREGROUND: f64 = 0.8;
const NOISE_SIGMA: f64 = 0.05;
pub const CLS_PLACEHOLDER: &str = "[CLS]";
pub const DEFAULT_NORMAL_TEMPLATE: &str = "a photo of normal [CLS]";
pub const DEFAULT_ABNORMAL_TEMPLATE: &str = "a photo of damaged [CLS]";

/// Shape families available to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Squares,
    Disks,
    Bars,
}

impl Category {
    pub fn name(&self) -> &'static str {
        match self {
            Category::Squares => "squares",
            Category::Disks => "disks",
            Category::Bars => "bars",
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squares" => Ok(Category::Squares),
            "disks" => Ok(Category::Disks),
            "bars" => Ok(Category::Bars),
            other => Err(Error::input(format!(
                "unknown category {other:?}; expected squares, disks, or bars"
            ))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub category: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub caption_normal_template: String,
    pub caption_abnormal_template: String,
}

impl DatasetManifest {
    pub fn new() -> Self {
        DatasetManifest {
            records: Vec::new(),
            caption_normal_template: DEFAULT_NORMAL_TEMPLATE.to_string(),
            caption_abnormal_template: DEFAULT_ABNORMAL_TEMPLATE.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::usage(format!("serializing manifest: {e}")))?;
        std::fs::write(path, json + "\n")
            .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("manifest {}: {e}", path.display()), 0))
    }

    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.records.iter().map(|r| r.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Caption pair for one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPair {
    pub normal: String,
    pub abnormal: String,
}

/// Substitute the category name into the manifest's caption templates.
pub fn make_captions(category: &str, manifest: &DatasetManifest) -> Result<CaptionPair> {
    for (tpl, which) in [
        (&manifest.caption_normal_template, "normal"),
        (&manifest.caption_abnormal_template, "abnormal"),
    ] {
        if !tpl.contains(CLS_PLACEHOLDER) {
            return Err(Error::usage(format!(
                "{which} caption template {tpl:?} lacks the {CLS_PLACEHOLDER} placeholder"
            )));
        }
    }
    Ok(CaptionPair {
        normal: manifest
            .caption_normal_template
            .replace(CLS_PLACEHOLDER, category)
            .to_lowercase(),
        abnormal: manifest
            .caption_abnormal_template
            .replace(CLS_PLACEHOLDER, category)
            .to_lowercase(),
    })
}

/// The zero-shot contract: train and test categories must not intersect.
pub fn assert_zero_shot(train: &DatasetManifest, test: &DatasetManifest) -> Result<()> {
    let train_cats = train.categories();
    let shared: Vec<String> =
        test.categories().into_iter().filter(|c| train_cats.contains(c)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::input(format!("categories shared between train and test: {shared:?}")))
    }
}

fn render_normal(category: Category, size: usize, rng: &mut SeededRng) -> Tensor {
    let mut img = Tensor::filled(&[size, size], BACKGROUND);
    let s = size as f64;
    match category {
        Category::Squares => {
            let cx = rng.range_f64(0.35 * s, 0.65 * s);
            let cy = rng.range_f64(0.35 * s, 0.65 * s);
            let half = rng.range_f64(s / 10.0, s / 7.0);
            for y in 0..size {
                for x in 0..size {
                    if (x as f64 - cx).abs() <= half && (y as f64 - cy).abs() <= half {
                        img.set(y, x, FOREGROUND);
                    }
                }
            }
        }
        Category::Disks => {
            let cx = rng.range_f64(0.375 * s, 0.625 * s);
            let cy = rng.range_f64(0.375 * s, 0.625 * s);
            let radius = rng.range_f64(s / 8.0, s / 6.0);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    if dx * dx + dy * dy <= radius * radius {
                        img.set(y, x, FOREGROUND);
                    }
                }
            }
        }
        Category::Bars => {
            let vertical = rng.next_f64() < 0.5;
            let center = rng.range_f64(0.25 * s, 0.75 * s);
            let half = rng.range_f64(s / 12.0, s / 8.0);
            for y in 0..size {
                for x in 0..size {
                    let pos = if vertical { x as f64 } else { y as f64 };
                    if (pos - center).abs() <= half {
                        img.set(y, x, FOREGROUND);
                    }
                }
            }
        }
    }
    img
}

fn add_noise(img: &mut Tensor, rng: &mut SeededRng) {
    for v in img.data_mut() {
        *v = (*v + NOISE_SIGMA * rng.next_normal()).clamp(0.0, 1.0);
    }
}

/// Stamp a contrasting blob (3-8 px across) and return its exact
/// footprint as a binary mask.
fn inject_defect(img: &mut Tensor, rng: &mut SeededRng) -> Tensor {
    let size = img.rows();
    let mut mask = Tensor::zeros(&[size, size]);
    let radius = rng.range_f64(2.5, 4.0);
    let margin = radius.ceil() + 1.0;
    let cx = rng.range_f64(margin, size as f64 - margin);
    let cy = rng.range_f64(margin, size as f64 - margin);

    // Contrast against the pixels the blob will cover.
    let mut covered = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= radius * radius {
                covered.push((y, x));
            }
        }
    }
    debug_assert!(!covered.is_empty());
    let mean: f64 =
        covered.iter().map(|&(y, x)| img.at(y, x)).sum::<f64>() / covered.len() as f64;
    let value = if mean > 0.5 { 0.05 } else { 0.95 };
    for &(y, x) in &covered {
        img.set(y, x, value);
        mask.set(y, x, 1.0);
    }
    mask
}

/// Render a normal or abnormal sample in memory. Returns (image, mask);
/// the mask is all-zero for normal samples.
pub fn synth_sample(
    category: Category,
    size: usize,
    abnormal: bool,
    rng: &mut SeededRng,
) -> (Tensor, Tensor) {
    let mut img = render_normal(category, size, rng);
    let mask = if abnormal { inject_defect(&mut img, rng) } else { Tensor::zeros(&[size, size]) };
    add_noise(&mut img, rng);
    (img, mask)
}

/// Generate a synthetic dataset on disk and return its manifest (also
/// written to `out_dir/manifest.json`). Deterministic in `seed`.
pub fn gen_synthetic(
    category: Category,
    n_normal: usize,
    n_abnormal: usize,
    image_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if image_size == 0 {
        return Err(Error::input("image size must be at least 1".to_string()));
    }
    if n_normal + n_abnormal == 0 {
        return Err(Error::input("dataset must contain at least one sample".to_string()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let master = SeededRng::new(seed);
    let mut manifest = DatasetManifest::new();
    let mut emit = |idx: usize, abnormal: bool, rng: &mut SeededRng| -> Result<()> {
        let (img, mask) = synth_sample(category, image_size, abnormal, rng);
        let kind = if abnormal { "abnormal" } else { "normal" };
        let image_path = out_dir.join(format!("{category}_{kind}_{idx:03}.pgm"));
        let mask_path = out_dir.join(format!("{category}_{kind}_{idx:03}_mask.pgm"));
        save_pgm(&img, &image_path)?;
        save_pgm(&mask, &mask_path)?;
        manifest.records.push(ManifestRecord {
            image_path: image_path.to_string_lossy().into_owned(),
            mask_path: mask_path.to_string_lossy().into_owned(),
            category: category.name().to_string(),
            label: u8::from(abnormal),
        });
        Ok(())
    };

    for i in 0..n_normal {
        let mut rng = master.derive(i as u64);
        emit(i, false, &mut rng)?;
    }
    for i in 0..n_abnormal {
        let mut rng = master.derive(0x8000_0000 + i as u64);
        emit(i, true, &mut rng)?;
    }

    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// In-memory variant of [`gen_synthetic`]: same draws, nothing on disk.
pub fn gen_synthetic_in_memory(
    category: Category,
    n_normal: usize,
    n_abnormal: usize,
    image_size: usize,
    seed: u64,
) -> Vec<(Tensor, Tensor, u8)> {
    let master = SeededRng::new(seed);
    let mut out = Vec::with_capacity(n_normal + n_abnormal);
    for i in 0..n_normal {
        let mut rng = master.derive(i as u64);
        let (img, mask) = synth_sample(category, image_size, false, &mut rng);
        out.push((img, mask, 0));
    }
    for i in 0..n_abnormal {
        let mut rng = master.derive(0x8000_0000 + i as u64);
        let (img, mask) = synth_sample(category, image_size, true, &mut rng);
        out.push((img, mask, 1));
    }
    out
}

/// Convenience for tests and commands: generate into a directory and hand
/// back manifest plus the directory path.
pub fn gen_to_dir(
    category: Category,
    n_normal: usize,
    n_abnormal: usize,
    image_size: usize,
    seed: u64,
    dir: PathBuf,
) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = gen_synthetic(category, n_normal, n_abnormal, image_size, seed, &dir)?;
    Ok((manifest, dir))
}

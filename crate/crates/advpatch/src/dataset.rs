//! Dataset ingestion: class-per-directory image trees with a deterministic
//! stratified train/validation split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::LabelVocabulary;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledImage};
use crate::util::subseed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: String,
    pub class: usize,
    pub split: Split,
}

/// Deterministic description of a dataset on disk: classes, per-image split
/// assignment, and the seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub val_fraction: f64,
    pub classes: Vec<String>,
    pub images: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn vocabulary(&self) -> Result<LabelVocabulary> {
        LabelVocabulary::new(self.classes.clone())
    }

    pub fn count(&self, split: Split) -> usize {
        self.images.iter().filter(|e| e.split == split).count()
    }

    /// Decode every image of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledImage>> {
        self.images
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let img = ImageTensor::from_file(self.root.join(&e.path))?;
                Ok(LabeledImage::new(img, e.class, e.path.clone()))
            })
            .collect()
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Scan a class-per-subdirectory image tree and assign a stratified split:
/// `round(val_fraction * n)` validation images per class, deterministic under
/// `seed`. Classes with fewer than two images stay entirely in train.
pub fn load_image_dataset<P: AsRef<Path>>(
    root: P,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Parameter(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    if !root.is_dir() {
        return Err(Error::Ingest(format!(
            "dataset root '{}' is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .map(|n| (n.to_string(), e.path()))
        })
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Ingest(format!(
            "dataset root '{}' has no class directories",
            root.display()
        )));
    }

    let mut classes = Vec::new();
    let mut images = Vec::new();
    for (name, dir) in class_dirs {
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image_file(p))
            .filter_map(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| format!("{name}/{n}"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("class directory '{name}' has no images; skipping");
            continue;
        }
        let class_idx = classes.len();
        classes.push(name.clone());

        let n = files.len();
        let n_val = if n < 2 {
            log::warn!("class '{name}' has fewer than 2 images; keeping all in train");
            0
        } else {
            (val_fraction * n as f64).round() as usize
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("split/{name}")));
        order.shuffle(&mut rng);
        let val_set: std::collections::BTreeSet<usize> =
            order[..n_val].iter().copied().collect();
        for (i, path) in files.into_iter().enumerate() {
            images.push(ManifestEntry {
                path,
                class: class_idx,
                split: if val_set.contains(&i) {
                    Split::Val
                } else {
                    Split::Train
                },
            });
        }
    }
    if images.is_empty() {
        return Err(Error::Ingest(format!(
            "dataset root '{}' contains no images",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        seed,
        val_fraction,
        classes,
        images,
    })
}

/// Write a synthetic dataset to disk in the class-per-directory layout.
pub fn write_image_tree<P: AsRef<Path>>(
    root: P,
    labels: &[String],
    images: &[LabeledImage],
) -> Result<()> {
    let root = root.as_ref();
    for (class, label) in labels.iter().enumerate() {
        let dir = root.join(label);
        std::fs::create_dir_all(&dir)?;
        for (i, li) in images.iter().filter(|li| li.label == class).enumerate() {
            li.image.save_png(dir.join(format!("img_{i:04}.png")))?;
        }
    }
    Ok(())
}

//! Slide interchange format, dataset manifests and cross-validation folds.
//!
//! A slide directory holds `manifest.json` and `features.bin`; the latter is
//! `N * D_in` little-endian `f32` values, row-major, with no header. A
//! dataset directory holds `dataset.json` (and a CSV copy, `dataset.csv`)
//! listing slide directories relative to itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bag::{segment_from_raw, segment_to_raw, SlideBag};
use crate::error::{Error, Result};
use crate::rng;

pub const SLIDE_MANIFEST: &str = "manifest.json";
pub const SLIDE_FEATURES: &str = "features.bin";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_CSV: &str = "dataset.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SlideManifest {
    slide_id: String,
    label: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D_in")]
    d_in: usize,
    segment_areas: BTreeMap<u32, f64>,
    segment_of: Vec<i64>,
    #[serde(default)]
    coords: Option<Vec<(i64, i64)>>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Creates `dir`, refusing to reuse an existing non-empty directory unless
/// `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_slide(bag: &SlideBag, dir: &Path, force: bool) -> Result<()> {
    bag.ensure_valid()?;
    let manifest_path = dir.join(SLIDE_MANIFEST);
    let features_path = dir.join(SLIDE_FEATURES);
    if !force && (manifest_path.exists() || features_path.exists()) {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = SlideManifest {
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        n: bag.n_instances(),
        d_in: bag.feature_dim(),
        segment_areas: bag.segment_areas.clone(),
        segment_of: bag.segment_of.iter().map(|s| segment_to_raw(*s)).collect(),
        coords: bag.coords.clone(),
    };
    let mut bytes = Vec::with_capacity(bag.features.len() * 4);
    for v in bag.features.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&features_path, bytes).map_err(|e| Error::io(&features_path, e))?;
    write_json(&manifest_path, &manifest)
}

pub fn read_slide(dir: &Path) -> Result<SlideBag> {
    let manifest_path = dir.join(SLIDE_MANIFEST);
    let features_path = dir.join(SLIDE_FEATURES);
    let m: SlideManifest = read_json(&manifest_path)?;
    let bytes = fs::read(&features_path).map_err(|e| Error::io(&features_path, e))?;
    let expected = 4 * (m.n as u64) * (m.d_in as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path: features_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Array2::from_shape_vec((m.n, m.d_in), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let segment_of = m
        .segment_of
        .iter()
        .map(|raw| segment_from_raw(*raw))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|msg| Error::Malformed(format!("{}: {msg}", manifest_path.display())))?;
    let bag = SlideBag {
        slide_id: m.slide_id,
        label: m.label,
        features,
        segment_of,
        segment_areas: m.segment_areas,
        coords: m.coords,
    };
    bag.ensure_valid()?;
    Ok(bag)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    /// Slide directory, relative to the dataset directory.
    pub path: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_count: usize,
    pub feature_dim: usize,
    pub slides: Vec<SlideEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Malformed("class_count must be at least 2".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.slides {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(Error::Malformed(format!(
                    "duplicate slide id {}",
                    s.slide_id
                )));
            }
            if s.label >= self.class_count {
                return Err(Error::Malformed(format!(
                    "slide {} has label {} but class_count is {}",
                    s.slide_id, s.label, self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, slide_id: &str) -> Option<&SlideEntry> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }
}

/// Writes `dataset.json` and `dataset.csv` into `dir`.
pub fn write_dataset_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    write_json(&dir.join(DATASET_MANIFEST), manifest)?;
    let csv_path = dir.join(DATASET_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Csv {
        path: csv_path.clone(),
        source: e,
    })?;
    let csv_err = |e| Error::Csv {
        path: csv_path.clone(),
        source: e,
    };
    w.write_record(["slide_id", "path", "label", "fold"])
        .map_err(csv_err)?;
    for s in &manifest.slides {
        w.write_record([
            s.slide_id.as_str(),
            s.path.as_str(),
            &s.label.to_string(),
            s.fold.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let m: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    m.validate()?;
    Ok(m)
}

/// Reads every slide listed in the manifest, checking that labels and the
/// feature dimension agree with it.
pub fn load_slides(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<SlideBag>> {
    manifest
        .slides
        .iter()
        .map(|entry| {
            let slide_dir: PathBuf = dir.join(&entry.path);
            let bag = read_slide(&slide_dir)?;
            if bag.slide_id != entry.slide_id || bag.label != entry.label {
                return Err(Error::Malformed(format!(
                    "{}: slide id/label ({}, {}) disagree with dataset entry ({}, {})",
                    slide_dir.display(),
                    bag.slide_id,
                    bag.label,
                    entry.slide_id,
                    entry.label
                )));
            }
            if bag.feature_dim() != manifest.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "{}: feature dimension {} but dataset declares {}",
                    slide_dir.display(),
                    bag.feature_dim(),
                    manifest.feature_dim
                )));
            }
            Ok(bag)
        })
        .collect()
}

/// Stratified `k`-fold split. Slides of each label are shuffled, then all
/// labels are dealt round-robin (label by label, continuing the rotation)
/// so fold sizes and per-label counts each differ by at most one. Each fold
/// is returned sorted.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    make_folds_from(
        manifest
            .slides
            .iter()
            .map(|s| (s.slide_id.clone(), s.label)),
        k,
        seed,
    )
}

pub fn make_folds_from(
    slides: impl IntoIterator<Item = (String, usize)>,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let mut by_label: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut total = 0;
    for (id, label) in slides {
        by_label.entry(label).or_default().push(id);
        total += 1;
    }
    if k < 2 || k > total {
        return Err(Error::invalid(format!(
            "fold count {k} must be between 2 and the number of slides ({total})"
        )));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (label, mut ids) in by_label {
        ids.sort();
        ids.shuffle(&mut rng::stream(
            seed,
            &["folds".into(), (label as u64).into()],
        ));
        for id in ids {
            folds[next % k].push(id);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

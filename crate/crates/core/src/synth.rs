//! Synthetic slides with a known tumor signal, for verification runs.
//!
//! Each dataset draws one unit-norm prototype per benign tissue category
//! plus one tumor prototype, all pairwise at least 30 degrees apart. A
//! slide mixes benign categories with a skewed (Zipf-like) distribution so
//! that one category dominates, and positive slides add a small number of
//! tumor instances. Every category is its own segment, with area
//! proportional to its instance count.

use std::path::Path;

use ndarray::Array2;
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bag::SlideBag;
use crate::error::{Error, Result};
use crate::io::{
    prepare_output_dir, write_dataset_manifest, write_json, write_slide, DatasetManifest,
    SlideEntry,
};
use crate::rng;

/// Raw area attributed to one instance (a 512 x 512 patch).
const PATCH_AREA: f64 = 512.0 * 512.0;
const MIN_PROTOTYPE_ANGLE_DEG: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n_slides: usize,
    pub instances_per_slide: (usize, usize),
    pub feature_dim: usize,
    /// Number of benign categories.
    pub n_categories: usize,
    pub positive_slide_fraction: f64,
    pub tumor_instance_fraction: f64,
    /// Zipf exponent of the benign category mix; larger means the dominant
    /// category takes a bigger share.
    pub redundancy_skew: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.instances_per_slide;
        let open = |x: f64| x > 0.0 && x < 1.0;
        let problem = if self.n_slides == 0 {
            Some("n_slides must be positive")
        } else if lo == 0 || lo > hi {
            Some("instances_per_slide must satisfy 1 <= min <= max")
        } else if self.feature_dim == 0 {
            Some("feature_dim must be positive")
        } else if self.n_categories == 0 {
            Some("n_categories must be positive")
        } else if !open(self.positive_slide_fraction) {
            Some("positive_slide_fraction must be in (0, 1)")
        } else if !open(self.tumor_instance_fraction) {
            Some("tumor_instance_fraction must be in (0, 1)")
        } else if !(self.redundancy_skew >= 1.0 && self.redundancy_skew.is_finite()) {
            Some("redundancy_skew must be >= 1")
        } else if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            Some("noise_sigma must be positive")
        } else {
            None
        };
        match problem {
            Some(msg) => Err(Error::invalid(msg)),
            None => Ok(()),
        }
    }

    /// Segment id of the tumor category.
    pub fn tumor_segment(&self) -> u32 {
        self.n_categories as u32 + 1
    }
}

/// Per-instance ground truth; written to `truth.json` next to each slide
/// and never read back by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub slide_id: String,
    pub instance_labels: Vec<u8>,
    pub categories: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SynthSpec,
    pub prototypes: Array2<f64>,
    pub slides: Vec<SlideBag>,
    pub truth: Vec<SlideTruth>,
}

impl SyntheticDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.spec.name.clone(),
            class_count: 2,
            feature_dim: self.spec.feature_dim,
            slides: self
                .slides
                .iter()
                .map(|b| SlideEntry {
                    slide_id: b.slide_id.clone(),
                    path: format!("slides/{}", b.slide_id),
                    label: b.label,
                    fold: None,
                })
                .collect(),
        }
    }
}

fn draw_prototypes(spec: &SynthSpec) -> Result<Array2<f64>> {
    let count = spec.n_categories + 1;
    let max_cos = MIN_PROTOTYPE_ANGLE_DEG.to_radians().cos();
    let mut r = rng::stream(spec.seed, &["prototypes".into()]);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while accepted.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(format!(
                "cannot place {count} prototypes {MIN_PROTOTYPE_ANGLE_DEG} degrees apart in {} dimensions",
                spec.feature_dim
            )));
        }
        let raw: Vec<f64> = (0..spec.feature_dim)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let unit: Vec<f64> = raw.into_iter().map(|v| v / norm).collect();
        let far_enough = accepted
            .iter()
            .all(|p| p.iter().zip(&unit).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
        if far_enough {
            accepted.push(unit);
        }
    }
    Ok(Array2::from_shape_fn(
        (count, spec.feature_dim),
        |(i, j)| accepted[i][j],
    ))
}

fn ceil_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction - 1e-9).ceil() as usize
}

/// Builds the dataset in memory.
pub fn synthesize(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let prototypes = draw_prototypes(spec)?;
    let tumor = spec.n_categories;

    let n_pos = ((spec.n_slides as f64) * spec.positive_slide_fraction).round() as usize;
    let mut labels: Vec<usize> = (0..spec.n_slides).map(|i| usize::from(i < n_pos)).collect();
    labels.shuffle(&mut rng::stream(spec.seed, &["labels".into()]));

    let rank_weights: Vec<f64> = (0..spec.n_categories)
        .map(|r| ((r + 1) as f64).powf(-spec.redundancy_skew))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let width = (spec.n_slides.max(1) - 1).to_string().len().max(4);

    let mut slides = Vec::with_capacity(spec.n_slides);
    let mut truth = Vec::with_capacity(spec.n_slides);
    for (i, &label) in labels.iter().enumerate() {
        let slide_id = format!("slide_{i:0width$}");
        let mut r = rng::stream(spec.seed, &["slide".into(), (i as u64).into()]);
        let (lo, hi) = spec.instances_per_slide;
        let n = r.gen_range(lo..=hi);
        let n_tumor = if label == 1 {
            ceil_count(n, spec.tumor_instance_fraction).clamp(1, n)
        } else {
            0
        };

        // Which benign category takes which rank varies per slide.
        let mut ranked: Vec<usize> = (0..spec.n_categories).collect();
        ranked.shuffle(&mut r);
        let pick = WeightedIndex::new(&rank_weights).expect("positive weights");
        let mut categories: Vec<usize> = (0..n - n_tumor)
            .map(|_| ranked[pick.sample(&mut r)])
            .collect();
        categories.extend(std::iter::repeat_n(tumor, n_tumor));
        categories.shuffle(&mut r);

        let features = Array2::from_shape_fn((n, spec.feature_dim), |(row, col)| {
            (prototypes[[categories[row], col]] + noise.sample(&mut r)) as f32
        });
        let segment_of = categories.iter().map(|&c| Some(c as u32 + 1)).collect();
        let mut segment_areas = std::collections::BTreeMap::new();
        for &c in &categories {
            *segment_areas.entry(c as u32 + 1).or_insert(0.0) += PATCH_AREA;
        }
        truth.push(SlideTruth {
            slide_id: slide_id.clone(),
            instance_labels: categories.iter().map(|&c| u8::from(c == tumor)).collect(),
            categories: categories.clone(),
        });
        slides.push(SlideBag {
            slide_id,
            label,
            features,
            segment_of,
            segment_areas,
            coords: None,
        });
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        prototypes,
        slides,
        truth,
    })
}

/// Writes the dataset to `out_dir` (`dataset.json`, `dataset.csv`,
/// `slides/<id>/{manifest.json, features.bin, truth.json}`).
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
    out_dir: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    let data = synthesize(spec)?;
    prepare_output_dir(out_dir, force)?;
    let manifest = data.manifest();
    for ((bag, entry), truth) in data.slides.iter().zip(&manifest.slides).zip(&data.truth) {
        let dir = out_dir.join(&entry.path);
        write_slide(bag, &dir, force)?;
        write_json(&dir.join("truth.json"), truth)?;
    }
    write_dataset_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

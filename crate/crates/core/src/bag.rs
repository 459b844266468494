//! Bags, instances, segments and group tokens.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// On-disk value of a `segment_of` entry for an instance with no segment.
pub const UNSEGMENTED: i64 = -1;

/// One weakly labelled slide: a set of instance features with their segment
/// membership and the raw areas of the segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub label: usize,
    /// `N x D_in`, one row per instance.
    pub features: Array2<f32>,
    /// Segment category of each instance; `None` when the instance fell
    /// outside every segment.
    pub segment_of: Vec<Option<u32>>,
    pub segment_areas: BTreeMap<u32, f64>,
    pub coords: Option<Vec<(i64, i64)>>,
}

impl SlideBag {
    pub fn n_instances(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn unsegmented_count(&self) -> usize {
        self.segment_of.iter().filter(|s| s.is_none()).count()
    }

    /// Checks every invariant and fails with the full violation list.
    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_bag(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidBag(violations))
        }
    }
}

/// Identity of a masking group: a real segment, or the pseudo-group formed
/// by all unsegmented instances. Sorts segments first, ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Segment(u32),
    Unsegmented,
}

impl From<Option<u32>> for GroupKey {
    fn from(s: Option<u32>) -> Self {
        s.map_or(GroupKey::Unsegmented, GroupKey::Segment)
    }
}

impl GroupKey {
    pub fn rng_label(self) -> u64 {
        match self {
            GroupKey::Segment(id) => u64::from(id),
            GroupKey::Unsegmented => u64::MAX,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Segment(id) => write!(f, "{id}"),
            GroupKey::Unsegmented => f.write_str("unsegmented"),
        }
    }
}

impl Serialize for GroupKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GroupKey::Segment(id) => s.serialize_i64(i64::from(*id)),
            GroupKey::Unsegmented => s.serialize_i64(UNSEGMENTED),
        }
    }
}

impl<'de> Deserialize<'de> for GroupKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = i64::deserialize(d)?;
        segment_from_raw(raw)
            .map(GroupKey::from)
            .map_err(serde::de::Error::custom)
    }
}

pub(crate) fn segment_from_raw(raw: i64) -> std::result::Result<Option<u32>, String> {
    if raw == UNSEGMENTED {
        Ok(None)
    } else {
        u32::try_from(raw)
            .map(Some)
            .map_err(|_| format!("segment id {raw} out of range"))
    }
}

pub(crate) fn segment_to_raw(s: Option<u32>) -> i64 {
    s.map_or(UNSEGMENTED, i64::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Empty,
    NonFiniteFeature,
    SegmentLengthMismatch,
    MissingArea,
    InvalidArea,
    AllAreasZero,
    CoordsLengthMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, message: String) -> Self {
        Self { kind, message }
    }
}

/// Every violated invariant of `bag`. An empty list means the bag is valid.
pub fn validate_bag(bag: &SlideBag) -> Vec<Violation> {
    use ViolationKind::*;

    let mut out = Vec::new();
    let n = bag.n_instances();
    if n == 0 {
        out.push(Violation::new(
            Empty,
            format!("slide {}: bag has no instances", bag.slide_id),
        ));
    }
    if bag.feature_dim() == 0 {
        out.push(Violation::new(
            Empty,
            format!("slide {}: feature dimension is zero", bag.slide_id),
        ));
    }
    for (row, values) in bag.features.rows().into_iter().enumerate() {
        if values.iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(
                NonFiniteFeature,
                format!("slide {}: row {row} has a non-finite feature", bag.slide_id),
            ));
        }
    }
    if bag.segment_of.len() != n {
        out.push(Violation::new(
            SegmentLengthMismatch,
            format!(
                "slide {}: segment_of has {} entries for {n} instances",
                bag.slide_id,
                bag.segment_of.len()
            ),
        ));
    }
    let mut missing: Vec<u32> = bag
        .segment_of
        .iter()
        .flatten()
        .filter(|id| !bag.segment_areas.contains_key(id))
        .copied()
        .collect();
    missing.sort_unstable();
    missing.dedup();
    for id in missing {
        out.push(Violation::new(
            MissingArea,
            format!("slide {}: segment {id} has no area entry", bag.slide_id),
        ));
    }
    for (id, area) in &bag.segment_areas {
        if !area.is_finite() || *area < 0.0 {
            out.push(Violation::new(
                InvalidArea,
                format!(
                    "slide {}: segment {id} has invalid area {area}",
                    bag.slide_id
                ),
            ));
        }
    }
    let any_segmented = bag.segment_of.iter().any(Option::is_some);
    if any_segmented && !bag.segment_areas.values().any(|a| *a > 0.0) {
        out.push(Violation::new(
            AllAreasZero,
            format!(
                "slide {}: instances are segmented but every area is zero",
                bag.slide_id
            ),
        ));
    }
    if let Some(coords) = &bag.coords {
        if coords.len() != n {
            out.push(Violation::new(
                CoordsLengthMismatch,
                format!(
                    "slide {}: coords has {} entries for {n} instances",
                    bag.slide_id,
                    coords.len()
                ),
            ));
        }
    }
    out
}

/// Area of every group as a fraction of the total.
///
/// Unsegmented instances, if any, form a synthetic group whose raw area is
/// `(unsegmented / N) * total segmented area` before normalization.
pub fn normalized_area_fractions(bag: &SlideBag) -> Result<BTreeMap<GroupKey, f64>> {
    let segmented_total: f64 = bag.segment_areas.values().sum();
    if segmented_total.is_nan() || segmented_total <= 0.0 {
        return Err(Error::DegenerateAreas);
    }
    let mut raw: BTreeMap<GroupKey, f64> = bag
        .segment_areas
        .iter()
        .map(|(id, a)| (GroupKey::Segment(*id), *a))
        .collect();
    let unsegmented = bag.unsegmented_count();
    if unsegmented > 0 {
        let share = unsegmented as f64 / bag.n_instances() as f64;
        raw.insert(GroupKey::Unsegmented, share * segmented_total);
    }
    let total: f64 = raw.values().sum();
    Ok(raw.into_iter().map(|(k, a)| (k, a / total)).collect())
}

/// Mean feature of one segment, appended to the bag as an extra token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupToken {
    pub segment_id: u32,
    pub feature: Vec<f64>,
    pub member_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Ordinary,
    Group,
}

/// The token sequence seen by the network: ordinary instances (widened to
/// `f64`) followed by group tokens. A masked bag keeps the same shape with a
/// subset of the tokens.
///
/// Only [`crate::group::augment_bag`], [`AugmentedBag::without_groups`] and
/// [`crate::masking::apply_mask`] build one, so an augmented bag cannot be
/// augmented again.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBag {
    pub(crate) slide_id: String,
    pub(crate) label: usize,
    pub(crate) tokens: Array2<f64>,
    pub(crate) kinds: Vec<TokenKind>,
    pub(crate) segments: Vec<Option<u32>>,
    pub(crate) group_tokens: Vec<GroupToken>,
    pub(crate) area_fractions: Option<BTreeMap<GroupKey, f64>>,
}

impl AugmentedBag {
    /// Token sequence of the ordinary instances only.
    pub fn without_groups(bag: &SlideBag) -> Self {
        Self {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            tokens: bag.features.mapv(f64::from),
            kinds: vec![TokenKind::Ordinary; bag.n_instances()],
            segments: bag.segment_of.clone(),
            group_tokens: Vec::new(),
            area_fractions: area_fractions_for_masking(bag),
        }
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// `N' x D_in` token matrix.
    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    /// Segment of every token; group tokens carry their own segment id.
    pub fn segments(&self) -> &[Option<u32>] {
        &self.segments
    }

    pub fn group_tokens(&self) -> &[GroupToken] {
        &self.group_tokens
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn ordinary_count(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| **k == TokenKind::Ordinary)
            .count()
    }

    /// Normalized group areas of the source slide, used by group masking.
    pub fn area_fractions(&self) -> Option<&BTreeMap<GroupKey, f64>> {
        self.area_fractions.as_ref()
    }
}

/// Area fractions for masking. A slide with no segment at all is a single
/// unsegmented group covering the whole slide.
pub(crate) fn area_fractions_for_masking(bag: &SlideBag) -> Option<BTreeMap<GroupKey, f64>> {
    match normalized_area_fractions(bag) {
        Ok(f) => Some(f),
        Err(_) if bag.segment_of.iter().all(Option::is_none) => {
            Some(BTreeMap::from([(GroupKey::Unsegmented, 1.0)]))
        }
        Err(_) => None,
    }
}

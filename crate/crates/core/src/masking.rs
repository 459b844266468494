//! Instance masking applied before the forward pass.
//!
//! Three strategies are provided: uniform masking over every token, uniform
//! masking over ordinary tokens only, and segment-guided group masking where
//! each segment group gets its own rate from its area fraction. Masking
//! removes tokens; it never zeroes them.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::bag::{AugmentedBag, GroupKey, TokenKind};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioKind {
    Constant,
    Linear,
    AdjustedSigmoid,
}

/// Maps a group's area fraction to a normalized ratio in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioFunction {
    pub kind: RatioKind,
    /// Sigmoid slope.
    #[serde(default = "default_slope")]
    pub a: f64,
    /// Sigmoid shift.
    #[serde(default = "default_shift")]
    pub b: f64,
}

fn default_slope() -> f64 {
    10.0
}

fn default_shift() -> f64 {
    -5.0
}

impl Default for RatioFunction {
    fn default() -> Self {
        Self::adjusted_sigmoid(default_slope(), default_shift())
    }
}

impl RatioFunction {
    pub fn constant() -> Self {
        Self {
            kind: RatioKind::Constant,
            ..Self::default()
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: RatioKind::Linear,
            ..Self::default()
        }
    }

    pub fn adjusted_sigmoid(a: f64, b: f64) -> Self {
        Self {
            kind: RatioKind::AdjustedSigmoid,
            a,
            b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == RatioKind::AdjustedSigmoid && !(self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::invalid(
                "adjusted sigmoid needs finite slope and shift",
            ));
        }
        Ok(())
    }

    /// Short label used in benchmark tables.
    pub fn label(&self) -> String {
        match self.kind {
            RatioKind::Constant => "constant".into(),
            RatioKind::Linear => "linear".into(),
            RatioKind::AdjustedSigmoid => format!("sigmoid({},{})", self.a, self.b),
        }
    }
}

pub fn ratio(f: &RatioFunction, area_fraction: f64) -> f64 {
    let r = match f.kind {
        RatioKind::Constant => 1.0,
        RatioKind::Linear => area_fraction,
        RatioKind::AdjustedSigmoid => 1.0 / (1.0 + (-(f.a * area_fraction + f.b)).exp()),
    };
    r.clamp(0.0, 1.0)
}

/// Target mask ratio of one group: `mr_target * ratio(area_fraction)`.
pub fn group_mask_ratio(f: &RatioFunction, area_fraction: f64, mr_target: f64) -> f64 {
    mr_target * ratio(f, area_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    None,
    FullRandom,
    NongroupRandom,
    Sg2m,
}

impl MaskStrategy {
    pub fn label(self) -> &'static str {
        match self {
            MaskStrategy::None => "none",
            MaskStrategy::FullRandom => "full_random",
            MaskStrategy::NongroupRandom => "nongroup_random",
            MaskStrategy::Sg2m => "sg2m",
        }
    }
}

/// Per-group bookkeeping of a group-masking plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMask {
    pub group: GroupKey,
    pub area_fraction: f64,
    pub members: usize,
    pub masked: usize,
    /// `MR_target * ratio(area_fraction)`.
    pub target_ratio: f64,
    /// `masked / members`.
    pub realized_ratio: f64,
}

/// A partition of a bag's token indices into retained and masked sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    slide_id: String,
    strategy: MaskStrategy,
    seed: u64,
    token_count: usize,
    retained: Vec<usize>,
    masked: Vec<usize>,
    per_group: Vec<GroupMask>,
}

impl MaskPlan {
    /// Checks the plan against `bag`: indices in range, disjoint, covering
    /// every token, and (except for full random masking) no masked group
    /// token. Index lists are stored sorted.
    pub fn new(
        bag: &AugmentedBag,
        strategy: MaskStrategy,
        seed: u64,
        mut retained: Vec<usize>,
        mut masked: Vec<usize>,
        per_group: Vec<GroupMask>,
    ) -> Result<Self> {
        let n = bag.len();
        retained.sort_unstable();
        masked.sort_unstable();
        let mut seen = vec![false; n];
        for &i in retained.iter().chain(&masked) {
            if i >= n {
                return Err(Error::InvalidPlan(format!(
                    "index {i} out of range for {n} tokens"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidPlan(format!("index {i} listed twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPlan(format!(
                "token {missing} is neither retained nor masked"
            )));
        }
        if strategy != MaskStrategy::FullRandom {
            if let Some(&g) = masked.iter().find(|&&i| bag.kinds[i] == TokenKind::Group) {
                return Err(Error::InvalidPlan(format!(
                    "group token {g} cannot be masked under {}",
                    strategy.label()
                )));
            }
        }
        Ok(Self {
            slide_id: bag.slide_id.clone(),
            strategy,
            seed,
            token_count: n,
            retained,
            masked,
            per_group,
        })
    }

    /// The plan that masks nothing.
    pub fn identity(bag: &AugmentedBag, seed: u64) -> Self {
        Self::new(
            bag,
            MaskStrategy::None,
            seed,
            (0..bag.len()).collect(),
            Vec::new(),
            Vec::new(),
        )
        .expect("identity plan is valid")
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn per_group(&self) -> &[GroupMask] {
        &self.per_group
    }

    pub fn per_group_ratio(&self) -> BTreeMap<GroupKey, f64> {
        self.per_group
            .iter()
            .map(|g| (g.group, g.realized_ratio))
            .collect()
    }
}

fn check_target(mr_target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mr_target) {
        return Err(Error::invalid(format!(
            "mask ratio {mr_target} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `floor(n * ratio)`; the small slack keeps products such as `10 * 0.3`
/// from losing a unit to representation error.
fn floor_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Segment-guided group masking.
///
/// Every group (including the unsegmented pseudo-group) masks
/// `floor(n_k * MR_k)` of its ordinary instances, capped at `n_k - 1`.
/// Group tokens are never masked.
pub fn plan_sg2m(
    bag: &AugmentedBag,
    f: &RatioFunction,
    mr_target: f64,
    seed: u64,
) -> Result<MaskPlan> {
    check_target(mr_target)?;
    f.validate()?;
    let fractions = bag.area_fractions.as_ref().ok_or(Error::DegenerateAreas)?;

    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, (kind, seg)) in bag.kinds.iter().zip(&bag.segments).enumerate() {
        if *kind == TokenKind::Ordinary {
            groups.entry(GroupKey::from(*seg)).or_default().push(i);
        }
    }

    let mut retained: Vec<usize> = bag
        .kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == TokenKind::Group)
        .map(|(i, _)| i)
        .collect();
    let mut masked = Vec::new();
    let mut per_group = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let n = members.len();
        let area_fraction = fractions.get(&key).copied().unwrap_or(0.0);
        let target = group_mask_ratio(f, area_fraction, mr_target);
        let count = floor_count(n, target).min(n - 1);
        let mut rng = rng::stream(
            seed,
            &[
                bag.slide_id.as_str().into(),
                "sg2m".into(),
                key.rng_label().into(),
            ],
        );
        let mut is_masked = vec![false; n];
        for local in index::sample(&mut rng, n, count) {
            is_masked[local] = true;
        }
        for (local, global) in members.into_iter().enumerate() {
            if is_masked[local] {
                masked.push(global);
            } else {
                retained.push(global);
            }
        }
        per_group.push(GroupMask {
            group: key,
            area_fraction,
            members: n,
            masked: count,
            target_ratio: target,
            realized_ratio: count as f64 / n as f64,
        });
    }
    MaskPlan::new(bag, MaskStrategy::Sg2m, seed, retained, masked, per_group)
}

fn plan_uniform(
    bag: &AugmentedBag,
    strategy: MaskStrategy,
    candidates: Vec<usize>,
    mr_target: f64,
    seed: u64,
) -> Result<MaskPlan> {
    check_target(mr_target)?;
    let n = candidates.len();
    let count = floor_count(n, mr_target).min(n.saturating_sub(1));
    let mut rng = rng::stream(
        seed,
        &[bag.slide_id.as_str().into(), strategy.label().into()],
    );
    let mut is_masked = vec![false; bag.len()];
    for local in index::sample(&mut rng, n, count) {
        is_masked[candidates[local]] = true;
    }
    let (masked, retained): (Vec<usize>, Vec<usize>) = (0..bag.len()).partition(|&i| is_masked[i]);
    MaskPlan::new(bag, strategy, seed, retained, masked, Vec::new())
}

/// Uniformly masks `floor((N + l) * mr_target)` tokens drawn from every
/// token, group tokens included; at least one token survives.
pub fn plan_full_random(bag: &AugmentedBag, mr_target: f64, seed: u64) -> Result<MaskPlan> {
    plan_uniform(
        bag,
        MaskStrategy::FullRandom,
        (0..bag.len()).collect(),
        mr_target,
        seed,
    )
}

/// Uniformly masks `floor(N * mr_target)` ordinary tokens; group tokens are
/// always kept and at least one ordinary token survives.
pub fn plan_nongroup_random(bag: &AugmentedBag, mr_target: f64, seed: u64) -> Result<MaskPlan> {
    let candidates = bag
        .kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == TokenKind::Ordinary)
        .map(|(i, _)| i)
        .collect();
    plan_uniform(
        bag,
        MaskStrategy::NongroupRandom,
        candidates,
        mr_target,
        seed,
    )
}

/// Dispatches on `strategy`; `None` yields the identity plan.
pub fn plan(
    bag: &AugmentedBag,
    strategy: MaskStrategy,
    f: &RatioFunction,
    mr_target: f64,
    seed: u64,
) -> Result<MaskPlan> {
    match strategy {
        MaskStrategy::None => Ok(MaskPlan::identity(bag, seed)),
        MaskStrategy::FullRandom => plan_full_random(bag, mr_target, seed),
        MaskStrategy::NongroupRandom => plan_nongroup_random(bag, mr_target, seed),
        MaskStrategy::Sg2m => plan_sg2m(bag, f, mr_target, seed),
    }
}

/// Keeps the retained tokens, in their original relative order.
pub fn apply_mask(bag: &AugmentedBag, plan: &MaskPlan) -> Result<AugmentedBag> {
    if plan.token_count != bag.len() || plan.slide_id != bag.slide_id {
        return Err(Error::InvalidPlan(format!(
            "plan for {} ({} tokens) applied to {} ({} tokens)",
            plan.slide_id,
            plan.token_count,
            bag.slide_id,
            bag.len()
        )));
    }
    if plan.masked.is_empty() {
        return Ok(bag.clone());
    }
    let keep = &plan.retained;
    let kinds: Vec<TokenKind> = keep.iter().map(|&i| bag.kinds[i]).collect();
    let segments: Vec<Option<u32>> = keep.iter().map(|&i| bag.segments[i]).collect();
    let kept_groups: Vec<u32> = keep
        .iter()
        .filter(|&&i| bag.kinds[i] == TokenKind::Group)
        .filter_map(|&i| bag.segments[i])
        .collect();
    Ok(AugmentedBag {
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        tokens: bag.tokens.select(Axis(0), keep),
        kinds,
        segments,
        group_tokens: bag
            .group_tokens
            .iter()
            .filter(|g| kept_groups.contains(&g.segment_id))
            .cloned()
            .collect(),
        area_fractions: bag.area_fractions.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::{SlideBag, UNSEGMENTED};
    use crate::group::augment_bag;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn grouped_bag(sizes: &[(Option<u32>, usize)], areas: &[(u32, f64)]) -> SlideBag {
        let segment_of: Vec<Option<u32>> = sizes
            .iter()
            .flat_map(|(s, n)| std::iter::repeat_n(*s, *n))
            .collect();
        let n = segment_of.len();
        SlideBag {
            slide_id: "slide".into(),
            label: 0,
            features: Array2::from_shape_fn((n, 2), |(r, c)| (r + c) as f32),
            segment_of,
            segment_areas: areas.iter().copied().collect(),
            coords: None,
        }
    }

    #[test]
    fn sigmoid_center_and_tails() {
        let f = RatioFunction::default();
        assert_eq!(ratio(&f, 0.5), 0.5);
        assert!((ratio(&f, 1.0) - 0.993_307).abs() < 1e-6);
        assert!((ratio(&f, 0.0) - 0.006_693).abs() < 1e-6);
    }

    #[test]
    fn constant_and_linear() {
        assert_eq!(ratio(&RatioFunction::constant(), 0.17), 1.0);
        assert_eq!(ratio(&RatioFunction::linear(), 0.17), 0.17);
        assert_eq!(group_mask_ratio(&RatioFunction::constant(), 0.3, 0.6), 0.6);
    }

    #[test]
    fn group_ratio_is_a_product() {
        let f = RatioFunction::default();
        assert_eq!(group_mask_ratio(&f, 0.5, 0.8), 0.4);
        assert_eq!(group_mask_ratio(&f, 0.93, 0.0), 0.0);
    }

    #[test]
    fn sg2m_masks_the_dominant_group() {
        let b = grouped_bag(&[(Some(1), 100), (Some(2), 10)], &[(1, 0.9), (2, 0.1)]);
        let a = augment_bag(&b).unwrap();
        let plan = plan_sg2m(&a, &RatioFunction::default(), 0.8, 3).unwrap();
        let by_group: BTreeMap<GroupKey, &GroupMask> =
            plan.per_group().iter().map(|g| (g.group, g)).collect();
        let ga = by_group[&GroupKey::Segment(1)];
        let gb = by_group[&GroupKey::Segment(2)];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((ga.target_ratio - 0.8 * sig(4.0)).abs() < 1e-12);
        assert!((gb.target_ratio - 0.8 * sig(-4.0)).abs() < 1e-12);
        assert!((ga.target_ratio - 0.785_61).abs() < 1e-5);
        assert!((gb.target_ratio - 0.014_39).abs() < 1e-5);
        assert_eq!(ga.masked, 78);
        assert_eq!(gb.masked, 0);
        assert_eq!(plan.masked().len(), 78);
        assert!(plan.masked().iter().all(|&i| i < 100));
        // Two group tokens at 110 and 111 are kept.
        assert!(plan.retained().contains(&110) && plan.retained().contains(&111));
    }

    #[test]
    fn zero_target_masks_nothing() {
        let b = grouped_bag(&[(Some(1), 7), (None, 3)], &[(1, 4.0)]);
        let a = augment_bag(&b).unwrap();
        let plan = plan_sg2m(&a, &RatioFunction::default(), 0.0, 1).unwrap();
        assert!(plan.masked().is_empty());
        assert_eq!(plan.retained().len(), a.len());
    }

    #[test]
    fn singleton_group_is_kept() {
        let b = grouped_bag(&[(Some(1), 1)], &[(1, 4.0)]);
        let a = augment_bag(&b).unwrap();
        let plan = plan_sg2m(&a, &RatioFunction::constant(), 1.0, 1).unwrap();
        assert!(plan.masked().is_empty());
    }

    #[test]
    fn sg2m_without_any_segment_uses_one_group() {
        let b = grouped_bag(&[(None, 10)], &[]);
        let a = augment_bag(&b).unwrap();
        let plan = plan_sg2m(&a, &RatioFunction::constant(), 0.5, 1).unwrap();
        assert_eq!(plan.masked().len(), 5);
        assert_eq!(plan.per_group()[0].group, GroupKey::Unsegmented);
    }

    #[test]
    fn target_out_of_range() {
        let b = grouped_bag(&[(Some(1), 3)], &[(1, 4.0)]);
        let a = augment_bag(&b).unwrap();
        assert!(plan_sg2m(&a, &RatioFunction::default(), 1.5, 0).is_err());
        assert!(plan_full_random(&a, -0.1, 0).is_err());
        assert!(plan_nongroup_random(&a, f64::NAN, 0).is_err());
    }

    #[test]
    fn full_random_counts() {
        let b = grouped_bag(&[(Some(1), 6), (Some(2), 2)], &[(1, 1.0), (2, 1.0)]);
        let a = augment_bag(&b).unwrap();
        assert_eq!(a.len(), 10);
        let p = plan_full_random(&a, 0.3, 9).unwrap();
        assert_eq!(p.masked().len(), 3);
        assert_eq!(p, plan_full_random(&a, 0.3, 9).unwrap());

        let one = grouped_bag(&[(None, 1)], &[]);
        let a1 = augment_bag(&one).unwrap();
        assert!(plan_full_random(&a1, 0.99, 9).unwrap().masked().is_empty());
    }

    #[test]
    fn nongroup_random_counts() {
        let b = grouped_bag(&[(Some(1), 6), (Some(2), 4)], &[(1, 1.0), (2, 1.0)]);
        let a = augment_bag(&b).unwrap();
        let p = plan_nongroup_random(&a, 0.5, 4).unwrap();
        assert_eq!(p.masked().len(), 5);
        assert!(p.retained().contains(&10) && p.retained().contains(&11));

        let one = grouped_bag(&[(None, 1)], &[]);
        let a1 = augment_bag(&one).unwrap();
        assert!(plan_nongroup_random(&a1, 0.5, 4)
            .unwrap()
            .masked()
            .is_empty());

        let four = grouped_bag(&[(None, 4)], &[]);
        let a4 = augment_bag(&four).unwrap();
        assert_eq!(plan_nongroup_random(&a4, 1.0, 4).unwrap().masked().len(), 3);
    }

    #[test]
    fn apply_identity_and_subset() {
        let b = grouped_bag(&[(None, 3)], &[]);
        let a = augment_bag(&b).unwrap();
        let id = MaskPlan::identity(&a, 0);
        assert_eq!(apply_mask(&a, &id).unwrap(), a);

        let p = MaskPlan::new(
            &a,
            MaskStrategy::NongroupRandom,
            0,
            vec![0, 2],
            vec![1],
            vec![],
        )
        .unwrap();
        let m = apply_mask(&a, &p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.tokens().row(0), a.tokens().row(0));
        assert_eq!(m.tokens().row(1), a.tokens().row(2));
    }

    #[test]
    fn plan_rejects_masked_group_token() {
        let b = grouped_bag(&[(Some(1), 3)], &[(1, 1.0)]);
        let a = augment_bag(&b).unwrap();
        let err = MaskPlan::new(&a, MaskStrategy::Sg2m, 0, vec![0, 1, 2], vec![3], vec![]);
        assert!(matches!(err, Err(Error::InvalidPlan(_))));
        // Full random masking may drop group tokens.
        assert!(MaskPlan::new(
            &a,
            MaskStrategy::FullRandom,
            0,
            vec![0, 1, 2],
            vec![3],
            vec![]
        )
        .is_ok());
    }

    #[test]
    fn plan_rejects_bad_indices() {
        let b = grouped_bag(&[(None, 3)], &[]);
        let a = augment_bag(&b).unwrap();
        assert!(MaskPlan::new(
            &a,
            MaskStrategy::NongroupRandom,
            0,
            vec![0, 1],
            vec![5],
            vec![]
        )
        .is_err());
        assert!(MaskPlan::new(
            &a,
            MaskStrategy::NongroupRandom,
            0,
            vec![0, 1],
            vec![1],
            vec![]
        )
        .is_err());
        assert!(MaskPlan::new(
            &a,
            MaskStrategy::NongroupRandom,
            0,
            vec![0],
            vec![1],
            vec![]
        )
        .is_err());
    }

    #[test]
    fn apply_rejects_foreign_plan() {
        let a = augment_bag(&grouped_bag(&[(None, 3)], &[])).unwrap();
        let b = augment_bag(&grouped_bag(&[(None, 5)], &[])).unwrap();
        let p = MaskPlan::identity(&b, 0);
        assert!(apply_mask(&a, &p).is_err());
    }

    #[test]
    fn plan_json_uses_sentinel_for_unsegmented() {
        let b = grouped_bag(&[(Some(2), 4), (None, 4)], &[(2, 1.0)]);
        let a = augment_bag(&b).unwrap();
        let p = plan_sg2m(&a, &RatioFunction::default(), 0.5, 0).unwrap();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["strategy"], "sg2m");
        assert_eq!(v["per_group"][1]["group"], UNSEGMENTED);
    }

    /// Each eligible index should be masked with frequency close to
    /// `count / n`; checked per index against three standard errors and as
    /// a chi-square statistic over the group.
    #[test]
    fn group_masking_is_uniform() {
        let b = grouped_bag(&[(Some(1), 20), (Some(2), 5)], &[(1, 0.8), (2, 0.2)]);
        let a = augment_bag(&b).unwrap();
        let f = RatioFunction::constant();
        let trials = 4000;
        let mut hits = vec![0usize; 20];
        for seed in 0..trials {
            let p = plan_sg2m(&a, &f, 0.5, seed).unwrap();
            for &i in p.masked() {
                if i < 20 {
                    hits[i] += 1;
                }
            }
        }
        let prob = 10.0 / 20.0;
        let expected = trials as f64 * prob;
        let se = (trials as f64 * prob * (1.0 - prob)).sqrt();
        let mut chi2 = 0.0;
        for h in &hits {
            assert!((*h as f64 - expected).abs() < 3.0 * se + 1.0, "{hits:?}");
            chi2 += (*h as f64 - expected).powi(2) / expected;
        }
        // 19 degrees of freedom; 0.999 quantile is about 43.8.
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn sigmoid_is_monotone(x in 0.0f64..1.0, y in 0.0f64..1.0, a in 0.1f64..30.0, b in -20.0f64..5.0) {
            prop_assume!((x - y).abs() > 1e-9);
            let f = RatioFunction::adjusted_sigmoid(a, b);
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            // Strictness only holds while the sigmoid is not saturated in f64.
            let (rl, rh) = (ratio(&f, lo), ratio(&f, hi));
            prop_assert!(rl <= rh);
            if rh < 1.0 - 1e-12 && (a * (hi - lo)) > 1e-6 {
                prop_assert!(rl < rh);
            }
        }
    }
}

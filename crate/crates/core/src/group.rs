//! Per-segment mean features appended as extra tokens.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};

use crate::bag::{area_fractions_for_masking, AugmentedBag, GroupToken, SlideBag, TokenKind};
use crate::error::Result;

/// One token per distinct segment id present in `segment_of`, ascending by
/// id. The mean is accumulated in `f64`.
pub fn compute_group_features(bag: &SlideBag) -> Result<Vec<GroupToken>> {
    bag.ensure_valid()?;
    let d = bag.feature_dim();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, seg) in bag.features.rows().into_iter().zip(&bag.segment_of) {
        let Some(id) = seg else { continue };
        let (acc, count) = sums.entry(*id).or_insert_with(|| (vec![0.0; d], 0));
        for (a, v) in acc.iter_mut().zip(row) {
            *a += f64::from(*v);
        }
        *count += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(segment_id, (acc, count))| GroupToken {
            segment_id,
            feature: acc.into_iter().map(|s| s / count as f64).collect(),
            member_count: count,
        })
        .collect())
}

/// Ordinary tokens in their original order, then one group token per
/// segment by ascending segment id.
pub fn augment_bag(bag: &SlideBag) -> Result<AugmentedBag> {
    let groups = compute_group_features(bag)?;
    let d = bag.feature_dim();
    let group_rows = Array2::from_shape_fn((groups.len(), d), |(r, c)| groups[r].feature[c]);
    let ordinary = bag.features.mapv(f64::from);
    let tokens = concatenate(Axis(0), &[ordinary.view(), group_rows.view()])
        .expect("group tokens share the instance feature dimension");

    let mut kinds = vec![TokenKind::Ordinary; bag.n_instances()];
    kinds.extend(std::iter::repeat_n(TokenKind::Group, groups.len()));
    let mut segments = bag.segment_of.clone();
    segments.extend(groups.iter().map(|g| Some(g.segment_id)));

    Ok(AugmentedBag {
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        tokens,
        kinds,
        segments,
        group_tokens: groups,
        area_fractions: area_fractions_for_masking(bag),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::testing::bag;
    use proptest::prelude::*;

    #[test]
    fn mean_of_two_members() {
        let b = bag(
            &[&[1.0, 2.0], &[3.0, 4.0]],
            &[Some(1), Some(1)],
            &[(1, 1.0)],
        );
        let g = compute_group_features(&b).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].feature, vec![2.0, 3.0]);
        assert_eq!(g[0].member_count, 2);
    }

    #[test]
    fn single_member_is_identity() {
        let b = bag(&[&[0.25, -7.5], &[1.0, 1.0]], &[Some(4), None], &[(4, 1.0)]);
        let g = compute_group_features(&b).unwrap();
        assert_eq!(g[0].feature, vec![0.25, -7.5]);
        assert_eq!(g[0].segment_id, 4);
    }

    #[test]
    fn all_unsegmented_yields_no_tokens() {
        let b = bag(&[&[1.0], &[2.0]], &[None, None], &[]);
        assert!(compute_group_features(&b).unwrap().is_empty());
    }

    #[test]
    fn tokens_are_ordered_by_segment_id() {
        let b = bag(
            &[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0]],
            &[Some(9), Some(2), Some(9), None, Some(2)],
            &[(2, 1.0), (9, 1.0)],
        );
        let a = augment_bag(&b).unwrap();
        assert_eq!(a.len(), 7);
        use TokenKind::*;
        assert_eq!(
            a.kinds(),
            &[Ordinary, Ordinary, Ordinary, Ordinary, Ordinary, Group, Group]
        );
        assert_eq!(a.segments()[5], Some(2));
        assert_eq!(a.segments()[6], Some(9));
        assert_eq!(a.tokens()[[5, 0]], 3.5);
        assert_eq!(a.tokens()[[6, 0]], 2.0);
        // Ordinary tokens keep their original order.
        assert_eq!(a.tokens()[[3, 0]], 4.0);
    }

    #[test]
    fn no_segments_is_the_plain_bag() {
        let b = bag(&[&[1.0], &[2.0]], &[None, None], &[]);
        let a = augment_bag(&b).unwrap();
        assert_eq!(a, AugmentedBag::without_groups(&b));
        assert!(a.group_tokens().is_empty());
    }

    #[test]
    fn invalid_bag_is_rejected() {
        let b = bag(&[&[1.0]], &[Some(3)], &[]);
        assert!(compute_group_features(&b).is_err());
    }

    proptest! {
        #[test]
        fn membership_counts_add_up(
            seg in prop::collection::vec(prop::option::of(0u32..4), 1..60),
        ) {
            let n = seg.len();
            let b = SlideBag {
                slide_id: "p".into(),
                label: 0,
                features: Array2::from_shape_fn((n, 3), |(r, c)| (r * 3 + c) as f32),
                segment_of: seg.clone(),
                segment_areas: (0..4).map(|k| (k, 1.0)).collect(),
                coords: None,
            };
            let g = compute_group_features(&b).unwrap();
            let counted: usize = g.iter().map(|t| t.member_count).sum();
            prop_assert_eq!(counted + b.unsegmented_count(), n);
        }

        #[test]
        fn mean_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-100f32..100.0, 4), 1..30),
            shift in 0usize..30,
        ) {
            let n = rows.len();
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let mut b = SlideBag {
                slide_id: "p".into(),
                label: 0,
                features: Array2::from_shape_vec((n, 4), flat).unwrap(),
                segment_of: vec![Some(1); n],
                segment_areas: [(1, 1.0)].into_iter().collect(),
                coords: None,
            };
            let before = compute_group_features(&b).unwrap();
            let mut rotated = rows.clone();
            rotated.rotate_left(shift % n);
            b.features = Array2::from_shape_vec((n, 4), rotated.into_iter().flatten().collect()).unwrap();
            let after = compute_group_features(&b).unwrap();
            for (x, y) in before[0].feature.iter().zip(&after[0].feature) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn constant_segment_is_exact(c in -1e3f32..1e3, n in 1usize..200) {
            let b = SlideBag {
                slide_id: "p".into(),
                label: 0,
                features: Array2::from_elem((n, 2), c),
                segment_of: vec![Some(5); n],
                segment_areas: [(5, 1.0)].into_iter().collect(),
                coords: None,
            };
            let g = compute_group_features(&b).unwrap();
            prop_assert!(g[0].feature.iter().all(|v| *v == f64::from(c)));
        }
    }
}

//! AP against a brute-force prefix-threshold oracle, plus rank-only properties.

use hoit::eval::{match_detections, Detection};
use hoit::geometry::BBox;
use hoit::matching::GroundTruthHoi;
use proptest::prelude::*;

mod support;

use support::oracles::{self, fixture, Fixture};

#[test]
fn ap_matches_prefix_threshold_oracle() {
    oracles::ap_matches_prefix_threshold_oracle();
}

#[test]
fn hand_fixture_two_gts() {
    oracles::hand_fixture_two_gts();
}

#[test]
fn low_score_true_positive_can_raise_ap() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let gt = GroundTruthHoi {
        human_box: b,
        object_box: b,
        object_class: 0,
        interaction_class: 0,
    };
    let det = |score| Detection {
        image: "x".into(),
        hoi_category: 0,
        human_box: b,
        object_box: b,
        score,
    };
    let mut f = Fixture {
        gts: vec![("x".into(), gt)],
        dets: vec![],
    };
    assert_eq!(f.ap(), 0.0);
    f.dets.push(det(0.1));
    assert_eq!(f.ap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ap_depends_only_on_rank(seed in any::<u64>(), k in 0.1f64..5.0, c in -3.0f64..3.0) {
        let mut f = fixture(seed);
        let before = f.ap();
        for d in &mut f.dets {
            d.score = (k * d.score).exp() + c;
        }
        prop_assert_eq!(before, f.ap());
    }

    /// Holds for false positives only: a low-score hit on a still unmatched
    /// ground truth adds recall, see `low_score_true_positive_can_raise_ap`.
    #[test]
    fn low_score_false_positive_tail_never_helps(seed in any::<u64>(), tail_seed in any::<u64>()) {
        let mut f = fixture(seed);
        let mut prev = f.ap();
        let extra = fixture(tail_seed);
        let floor = f.dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min).min(0.0);
        for (i, mut d) in extra.dets.into_iter().enumerate() {
            d.score = floor - 1.0 - i as f64;
            // No ground truth lives in this image, so it cannot match.
            d.image = "elsewhere".into();
            f.dets.push(d);
            let after = f.ap();
            prop_assert!(after <= prev + 1e-12, "{after} > {prev}");
            prev = after;
        }
    }

    #[test]
    fn each_gt_claimed_at_most_once(seed in any::<u64>()) {
        let f = fixture(seed);
        let dets: Vec<&Detection> = f.dets.iter().collect();
        let refs = f.refs();
        let hits = match_detections(&dets, &refs);
        let mut claimed: Vec<usize> = hits.iter().flatten().copied().collect();
        let n = claimed.len();
        claimed.sort_unstable();
        claimed.dedup();
        prop_assert_eq!(claimed.len(), n);
        prop_assert!(claimed.iter().all(|&g| g < refs.len()));
    }
}

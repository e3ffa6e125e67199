//! Brute-force references for the assignment solver and AP.

use std::time::Instant;

use hoit::eval::{compute_ap, Detection, GtRef};
use hoit::geometry::{iou, BBox};
use hoit::matching::{build_cost_matrix, hungarian, CostMatrix, GroundTruthHoi, MatchWeights};
use hoit::model::HoiPrediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C_OBJ: usize = 4;
const C_INT: usize = 3;

/// Exhaustive minimum over all permutations (Heap's algorithm).
pub fn brute_force(cost: &CostMatrix) -> f64 {
    let n = cost.size();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| (0..n).map(|i| cost.get(i, p[i])).sum::<f64>();
    let mut best = total(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, integer: bool) -> CostMatrix {
    let data = (0..n * n)
        .map(|_| if integer { rng.gen_range(0..5) as f64 } else { rng.gen_range(0.0..10.0) })
        .collect();
    CostMatrix::new(n, data)
}

pub fn hungarian_equals_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let n = 1 + case % 7;
        // Every fourth matrix is small integers, so ties are common.
        let cost = random_matrix(&mut rng, n, case % 4 == 0);
        let a = hungarian(&cost).unwrap();
        assert!(a.is_permutation());
        let best = brute_force(&cost);
        assert!(
            (a.total(&cost) - best).abs() <= 1e-9 * best.abs().max(1.0),
            "case {case}: hungarian {} brute force {best}",
            a.total(&cost)
        );
    }
    assert!(start.elapsed().as_secs() < 30, "took {:?}", start.elapsed());
}

pub fn gt(h: BBox, o: BBox, object: usize, interaction: usize) -> GroundTruthHoi {
    GroundTruthHoi {
        human_box: h,
        object_box: o,
        object_class: object,
        interaction_class: interaction,
    }
}

fn confident(n: usize, hot: usize, margin: f64) -> Vec<f64> {
    (0..n).map(|i| if i == hot { margin } else { 0.0 }).collect()
}

/// One ground truth, two candidates: the first predicts the wrong interaction,
/// the second the right one with tighter boxes. The second must be matched.
pub fn correct_interaction_wins_the_match() {
    let human = BBox::new(0.3, 0.5, 0.2, 0.6);
    let object = BBox::new(0.6, 0.6, 0.15, 0.15);
    let target = gt(human, object, 1, 2);
    let wrong = HoiPrediction {
        human_logits: vec![4.0, 0.0],
        object_logits: confident(C_OBJ + 1, 1, 4.0),
        interaction_logits: confident(C_INT + 1, 0, 4.0),
        human_box: BBox::new(0.32, 0.52, 0.22, 0.58),
        object_box: BBox::new(0.62, 0.58, 0.16, 0.14),
    };
    let right = HoiPrediction {
        interaction_logits: confident(C_INT + 1, 2, 4.0),
        human_box: BBox::new(0.31, 0.5, 0.2, 0.6),
        object_box: BBox::new(0.6, 0.61, 0.15, 0.15),
        ..wrong.clone()
    };
    let w = MatchWeights::default();
    let cost = build_cost_matrix(&[target], &[wrong.clone(), right.clone()], &w).unwrap();
    assert_eq!(hungarian(&cost).unwrap().sigma, vec![1, 0]);
    // Same outcome with the candidates listed the other way round.
    let cost = build_cost_matrix(&[target], &[right, wrong], &w).unwrap();
    assert_eq!(hungarian(&cost).unwrap().sigma, vec![0, 1]);
}

pub struct Fixture {
    pub gts: Vec<(String, GroundTruthHoi)>,
    pub dets: Vec<Detection>,
}

impl Fixture {
    pub fn refs(&self) -> Vec<GtRef<'_>> {
        self.gts.iter().map(|(image, hoi)| GtRef { image, hoi }).collect()
    }

    pub fn ap(&self) -> f64 {
        let dets: Vec<&Detection> = self.dets.iter().collect();
        compute_ap(&dets, &self.refs()).expect("fixtures have ground truth")
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: BBox, amount: f64) -> BBox {
    let mut j = || rng.gen_range(-amount..amount);
    BBox::new(b.cx + j(), b.cy + j(), (b.w + j()).max(0.02), (b.h + j()).max(0.02))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4))
}

/// Up to 6 detections over 1-3 ground truths in 1-2 images. Detections mostly
/// sit near some ground truth, with jitter wide enough to straddle the IoU
/// threshold. Scores are distinct.
pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = ["a", "b"];
    let n_img = rng.gen_range(1..=2);
    let gts: Vec<(String, GroundTruthHoi)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let hoi = GroundTruthHoi {
                human_box: random_box(&mut rng),
                object_box: random_box(&mut rng),
                object_class: 0,
                interaction_class: 0,
            };
            (images[rng.gen_range(0..n_img)].to_string(), hoi)
        })
        .collect();
    let mut scores: Vec<f64> = (0..rng.gen_range(0..=6)).map(|i| i as f64 + rng.gen_range(0.0..0.9)).collect();
    scores.sort_by(|a, b| a.total_cmp(b));
    // shuffle input order so it differs from score order
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.gen_range(0..=i));
    }
    let dets = scores
        .into_iter()
        .map(|score| {
            let (image, human_box, object_box) = if rng.gen_bool(0.8) {
                let (img, g) = &gts[rng.gen_range(0..gts.len())];
                let amount = rng.gen_range(0.0..0.08);
                (img.clone(), jitter(&mut rng, g.human_box, amount), jitter(&mut rng, g.object_box, amount))
            } else {
                (images[rng.gen_range(0..n_img)].to_string(), random_box(&mut rng), random_box(&mut rng))
            };
            Detection {
                image,
                hoi_category: 0,
                human_box,
                object_box,
                score,
            }
        })
        .collect();
    Fixture { gts, dets }
}

/// Greedy matching of the top-`k` detections, done from scratch for every
/// prefix, then the precision envelope sampled at each recall level.
pub fn brute_force_ap(f: &Fixture) -> f64 {
    let mut order: Vec<&Detection> = f.dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let g = f.gts.len();
    let mut points = vec![(0.0f64, 0.0f64)];
    for k in 1..=order.len() {
        let mut claimed = vec![false; g];
        let mut tp = 0;
        for d in &order[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (j, (img, gt)) in f.gts.iter().enumerate() {
                let overlap = iou(&d.human_box, &gt.human_box).min(iou(&d.object_box, &gt.object_box));
                if claimed[j] || *img != d.image || overlap <= 0.5 {
                    continue;
                }
                if best.map_or(true, |(_, o)| overlap > o) {
                    best = Some((j, overlap));
                }
            }
            if let Some((j, _)) = best {
                claimed[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / g as f64, tp as f64 / k as f64));
    }
    (1..=g)
        .map(|level| {
            let r = level as f64 / g as f64;
            points
                .iter()
                .filter(|(recall, _)| *recall >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / g as f64
}

pub fn ap_matches_prefix_threshold_oracle() {
    let mut nontrivial = 0;
    for seed in 0..1000 {
        let f = fixture(seed);
        let (got, want) = (f.ap(), brute_force_ap(&f));
        assert!((got - want).abs() < 1e-12, "seed {seed}: ap {got} oracle {want}");
        if want > 0.0 && want < 1.0 {
            nontrivial += 1;
        }
    }
    assert!(nontrivial > 200, "fixtures too easy: {nontrivial} with AP strictly between 0 and 1");
}

pub fn hand_fixture_two_gts() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let far = BBox::new(0.1, 0.1, 0.05, 0.05);
    let gt = |h: BBox| GroundTruthHoi {
        human_box: h,
        object_box: h,
        object_class: 0,
        interaction_class: 0,
    };
    let other = BBox::new(0.8, 0.8, 0.2, 0.2);
    let f = Fixture {
        gts: vec![("x".into(), gt(b)), ("x".into(), gt(other))],
        dets: [(b, 0.9), (far, 0.8), (other, 0.7)]
            .into_iter()
            .map(|(bx, score)| Detection {
                image: "x".into(),
                hoi_category: 0,
                human_box: bx,
                object_box: bx,
                score,
            })
            .collect(),
    };
    assert!((f.ap() - 0.8333333333).abs() < 1e-6);
    assert!((brute_force_ap(&f) - 5.0 / 6.0).abs() < 1e-12);
}


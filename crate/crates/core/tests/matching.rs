//! Assignment optimality and loss semantics.

use hoit::geometry::BBox;
use hoit::matching::{
    build_cost_matrix, hoi_loss, hungarian, pair_cost, Assignment, GroundTruthHoi, MatchWeights,
};
use hoit::model::HeadOutputs;
use hoit::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::oracles::{self, gt, random_matrix};

const C_OBJ: usize = 4;
const C_INT: usize = 3;

#[test]
fn hungarian_equals_brute_force() {
    oracles::hungarian_equals_brute_force();
}

#[test]
fn hungarian_beats_random_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [10, 16, 40] {
        let cost = random_matrix(&mut rng, n, false);
        let opt = hungarian(&cost).unwrap().total(&cost);
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..1000 {
            perm.shuffle(&mut rng);
            let t = Assignment { sigma: perm.clone() }.total(&cost);
            assert!(opt <= t + 1e-9, "n {n}: {opt} > {t}");
        }
    }
}

#[test]
fn correct_interaction_wins_the_match() {
    oracles::correct_interaction_wins_the_match();
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4))
}

fn random_gts(rng: &mut ChaCha8Rng, m: usize) -> Vec<GroundTruthHoi> {
    (0..m)
        .map(|_| gt(random_box(rng), random_box(rng), rng.gen_range(0..C_OBJ), rng.gen_range(0..C_INT)))
        .collect()
}

struct Scene {
    gts: Vec<GroundTruthHoi>,
    rows: [Tensor; 5],
}

fn random_scene(seed: u64, n: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(0..=n.min(4));
    let mut logits = |c: usize| Tensor::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let (hl, ol, il) = (logits(2), logits(C_OBJ + 1), logits(C_INT + 1));
    let mut boxes = || Tensor::new(vec![n, 4], (0..n).flat_map(|_| random_box(&mut rng).to_array()).collect()).unwrap();
    let (hb, ob) = (boxes(), boxes());
    Scene {
        gts: random_gts(&mut rng, m),
        rows: [hl, ol, il, hb, ob],
    }
}

impl Scene {
    fn heads(&self, g: &mut Graph) -> HeadOutputs {
        let [hl, ol, il, hb, ob] = self.rows.clone().map(|t| g.variable(t));
        HeadOutputs {
            human_logits: hl,
            object_logits: ol,
            interaction_logits: il,
            human_boxes: hb,
            object_boxes: ob,
        }
    }

    /// Prediction rows reordered: row `i` of the result is row `perm[i]`.
    fn permuted(&self, perm: &[usize]) -> Scene {
        let rows = self.rows.clone().map(|t| {
            let c = t.shape()[1];
            let data = perm.iter().flat_map(|&r| t.row(r).to_vec()).collect::<Vec<_>>();
            Tensor::new(vec![perm.len(), c], data).unwrap()
        });
        Scene {
            gts: self.gts.clone(),
            rows,
        }
    }

    fn matched_loss(&self, w: &MatchWeights) -> f64 {
        let mut g = Graph::new();
        let heads = self.heads(&mut g);
        let preds = heads.predictions(&g);
        let sigma = hungarian(&build_cost_matrix(&self.gts, &preds, w).unwrap()).unwrap();
        let l = hoi_loss(&mut g, &heads, &self.gts, &sigma, w).unwrap();
        g.value(l.total).item()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// The loss is the assignment's pair costs with background slots carrying
    /// only the down-weighted classification part, divided by `max(M, 1)`.
    #[test]
    fn loss_equals_weighted_pair_costs(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let n = 6;
        let scene = random_scene(seed, n);
        let w = MatchWeights::default();
        let mut g = Graph::new();
        let heads = scene.heads(&mut g);
        let preds = heads.predictions(&g);
        // Any permutation, not only the optimal one.
        let mut sigma: Vec<usize> = (0..n).collect();
        sigma.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let m = scene.gts.len();
        let expected = (0..n)
            .map(|i| match scene.gts.get(i) {
                Some(t) => pair_cost(Some(t), &preds[sigma[i]], &w),
                None => w.background_weight * pair_cost(None, &preds[sigma[i]], &w),
            })
            .sum::<f64>()
            / m.max(1) as f64;
        let l = hoi_loss(&mut g, &heads, &scene.gts, &Assignment { sigma }, &w).unwrap();
        let got = g.value(l.total).item();
        prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0), "{got} vs {expected}");
        prop_assert!((l.parts.total - got).abs() <= 1e-12 * got.abs().max(1.0));
    }

    #[test]
    fn loss_ignores_prediction_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let n = 6;
        let scene = random_scene(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let w = MatchWeights::default();
        let a = scene.matched_loss(&w);
        let b = scene.permuted(&perm).matched_loss(&w);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn scaling_weights_keeps_the_argmin(seed in any::<u64>(), k in 0.01f64..100.0) {
        let scene = random_scene(seed, 6);
        let w = MatchWeights::default();
        let mut g = Graph::new();
        let preds = scene.heads(&mut g).predictions(&g);
        let base = hungarian(&build_cost_matrix(&scene.gts, &preds, &w).unwrap()).unwrap();
        let scaled_cost = build_cost_matrix(&scene.gts, &preds, &w.scaled(k)).unwrap();
        let scaled = hungarian(&scaled_cost).unwrap();
        // Ties between background rows make sigma itself non-unique; the
        // real-GT slots and the optimal total are what must agree.
        let m = scene.gts.len();
        prop_assert_eq!(&base.sigma[..m], &scaled.sigma[..m]);
        let t = base.total(&scaled_cost);
        prop_assert!((scaled.total(&scaled_cost) - t).abs() <= 1e-9 * t.max(1.0));
    }

    #[test]
    fn cost_matrix_entries_are_pair_costs(seed in any::<u64>()) {
        let scene = random_scene(seed, 5);
        let w = MatchWeights::default();
        let mut g = Graph::new();
        let preds = scene.heads(&mut g).predictions(&g);
        let cost = build_cost_matrix(&scene.gts, &preds, &w).unwrap();
        for i in 0..5 {
            for (j, p) in preds.iter().enumerate() {
                prop_assert_eq!(cost.get(i, j), pair_cost(scene.gts.get(i), p, &w));
            }
        }
    }
}

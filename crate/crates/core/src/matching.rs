//! Quintuple matching cost, optimal one-to-one assignment, and the training
//! loss over matched pairs.
//!
//! Ground truths are padded with "no instance" slots up to the number of
//! predictions `N`, so the assignment is a permutation of `0..N`. The same cost
//! formula and weights drive both the assignment and the loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_l1, box_losses, giou, BBox};
use crate::model::{HeadOutputs, HoiPrediction};
use crate::tensor::{self, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("{gts} ground-truth HOIs exceed the {queries} available queries; raise num_queries")]
    Capacity { gts: usize, queries: usize },
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("assignment is not a permutation of 0..{0}")]
    NotPermutation(usize),
    #[error("prediction count mismatch: expected {expected}, got {got}")]
    PredictionCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

/// One annotated human-object interaction. The human class is always foreground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthHoi {
    pub human_box: BBox,
    pub object_box: BBox,
    #[serde(rename = "object")]
    pub object_class: usize,
    #[serde(rename = "interaction")]
    pub interaction_class: usize,
}

/// Weights of the matching cost / loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub alpha_human: f64,
    pub alpha_object: f64,
    pub alpha_interaction: f64,
    /// Weight of the classification group.
    pub beta_class: f64,
    /// Weight of the box group.
    pub beta_box: f64,
    /// Inner weight of `1 - GIoU` within one box term.
    pub giou_weight: f64,
    /// Inner weight of the L1 distance within one box term.
    pub l1_weight: f64,
    /// Loss multiplier for classification terms of no-instance slots.
    pub background_weight: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            alpha_human: 1.0,
            alpha_object: 1.0,
            alpha_interaction: 2.0,
            beta_class: 2.0,
            beta_box: 1.0,
            giou_weight: 2.0,
            l1_weight: 5.0,
            background_weight: 0.1,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("alpha_human", self.alpha_human),
            ("alpha_object", self.alpha_object),
            ("alpha_interaction", self.alpha_interaction),
            ("beta_class", self.beta_class),
            ("beta_box", self.beta_box),
            ("giou_weight", self.giou_weight),
            ("l1_weight", self.l1_weight),
            ("background_weight", self.background_weight),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Every cost weight multiplied by `k` (the background loss multiplier
    /// is a ratio and stays as is).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha_human: self.alpha_human * k,
            alpha_object: self.alpha_object * k,
            alpha_interaction: self.alpha_interaction * k,
            beta_class: self.beta_class * k,
            beta_box: self.beta_box * k,
            giou_weight: self.giou_weight * k,
            l1_weight: self.l1_weight * k,
            background_weight: self.background_weight,
        }
    }
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

fn ce(logits: &[f64], target: usize) -> f64 {
    -log_softmax_at(logits, target)
}

/// `1 - GIoU` and L1, combined with the inner box weights.
pub fn box_cost(pred: &BBox, target: &BBox, w: &MatchWeights) -> f64 {
    w.giou_weight * (1.0 - giou(pred, target)) + w.l1_weight * box_l1(pred, target)
}

/// Matching cost between one padded ground-truth slot and one prediction.
///
/// A real slot pays the weighted classification cross entropies against its
/// labels plus both box terms; a no-instance slot (`None`) pays the
/// classification cross entropies against the background classes only.
pub fn pair_cost(gt: Option<&GroundTruthHoi>, p: &HoiPrediction, w: &MatchWeights) -> f64 {
    let obj_bg = p.object_logits.len() - 1;
    let int_bg = p.interaction_logits.len() - 1;
    match gt {
        Some(g) => {
            let cls = w.alpha_human * ce(&p.human_logits, 0)
                + w.alpha_object * ce(&p.object_logits, g.object_class)
                + w.alpha_interaction * ce(&p.interaction_logits, g.interaction_class);
            let boxes = box_cost(&p.human_box, &g.human_box, w) + box_cost(&p.object_box, &g.object_box, w);
            w.beta_class * cls + w.beta_box * boxes
        }
        None => {
            let cls = w.alpha_human * ce(&p.human_logits, 1)
                + w.alpha_object * ce(&p.object_logits, obj_bg)
                + w.alpha_interaction * ce(&p.interaction_logits, int_bg);
            w.beta_class * cls
        }
    }
}

/// Square cost matrix; row `i` is ground-truth slot `i`, column `j` prediction `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "cost matrix must be square");
        Self { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        Self::new(n, rows.iter().flatten().copied().collect())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }
}

/// `sigma[i]` is the prediction assigned to ground-truth slot `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            sigma: (0..n).collect(),
        }
    }

    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.sigma.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }

    pub fn is_permutation(&self) -> bool {
        let n = self.sigma.len();
        let mut seen = vec![false; n];
        self.sigma.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true))
    }
}

/// Costs of the `gts` (first rows) and no-instance padding (remaining rows)
/// against every prediction.
pub fn build_cost_matrix(
    gts: &[GroundTruthHoi],
    preds: &[HoiPrediction],
    w: &MatchWeights,
) -> Result<CostMatrix, MatchError> {
    let n = preds.len();
    if gts.len() > n {
        return Err(MatchError::Capacity {
            gts: gts.len(),
            queries: n,
        });
    }
    let mut data = Vec::with_capacity(n * n);
    for g in gts {
        data.extend(preds.iter().map(|p| pair_cost(Some(g), p, w)));
    }
    if gts.len() < n {
        let empty: Vec<f64> = preds.iter().map(|p| pair_cost(None, p, w)).collect();
        for _ in gts.len()..n {
            data.extend_from_slice(&empty);
        }
    }
    Ok(CostMatrix::new(n, data))
}

/// Exact minimum-cost perfect matching (Kuhn-Munkres with row/column
/// potentials and shortest augmenting paths), `O(n^3)`.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    let n = cost.size();
    for i in 0..n {
        for j in 0..n {
            if !cost.get(i, j).is_finite() {
                return Err(MatchError::NonFinite { row: i, col: j });
            }
        }
    }
    // 1-based indexing; column 0 is a virtual column holding the row being inserted.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[col_row[j] - 1] = j - 1;
    }
    Ok(Assignment { sigma })
}

/// Scalar values of the loss terms, after normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub class_human: f64,
    pub class_object: f64,
    pub class_interaction: f64,
    pub giou: f64,
    pub l1: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.class_human += o.class_human;
        self.class_object += o.class_object;
        self.class_interaction += o.class_interaction;
        self.giou += o.giou;
        self.l1 += o.l1;
    }
}

impl LossParts {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            total: self.total * k,
            class_human: self.class_human * k,
            class_object: self.class_object * k,
            class_interaction: self.class_interaction * k,
            giou: self.giou * k,
            l1: self.l1 * k,
        }
    }
}

pub struct HoiLoss {
    pub total: Var,
    pub parts: LossParts,
}

/// Differentiable loss over the matched pairs, normalized by `max(M, 1)`.
///
/// Slot `i < M` supervises prediction `sigma[i]` with the full pair cost; the
/// remaining slots supervise their predictions towards the background classes
/// with the classification terms multiplied by `background_weight`.
pub fn hoi_loss(
    g: &mut Graph,
    heads: &HeadOutputs,
    gts: &[GroundTruthHoi],
    assignment: &Assignment,
    w: &MatchWeights,
) -> Result<HoiLoss, MatchError> {
    let n = g.shape(heads.human_logits)[0];
    if assignment.sigma.len() != n || !assignment.is_permutation() {
        return Err(MatchError::NotPermutation(n));
    }
    if gts.len() > n {
        return Err(MatchError::Capacity {
            gts: gts.len(),
            queries: n,
        });
    }
    let m = gts.len();
    let norm = 1.0 / m.max(1) as f64;
    let obj_bg = g.shape(heads.object_logits)[1] - 1;
    let int_bg = g.shape(heads.interaction_logits)[1] - 1;

    // Per-prediction targets; unmatched-to-real predictions default to background.
    let mut matched: Vec<Option<&GroundTruthHoi>> = vec![None; n];
    for (i, gt) in gts.iter().enumerate() {
        matched[assignment.sigma[i]] = Some(gt);
    }
    let class_weight = |alpha: f64, real: bool| {
        let bg = if real { 1.0 } else { w.background_weight };
        w.beta_class * alpha * bg * norm
    };
    let class_term = |g: &mut Graph, logits: Var, alpha: f64, target: &dyn Fn(&GroundTruthHoi) -> usize, bg: usize| {
        let targets: Vec<usize> = matched.iter().map(|m| m.map_or(bg, target)).collect();
        let weights: Vec<f64> = matched.iter().map(|m| class_weight(alpha, m.is_some())).collect();
        g.cross_entropy(logits, &targets, &weights)
    };
    let ch = class_term(g, heads.human_logits, w.alpha_human, &|_| 0, 1)?;
    let co = class_term(g, heads.object_logits, w.alpha_object, &|t| t.object_class, obj_bg)?;
    let ci = class_term(g, heads.interaction_logits, w.alpha_interaction, &|t| t.interaction_class, int_bg)?;
    let mut parts = LossParts {
        class_human: g.value(ch).item(),
        class_object: g.value(co).item(),
        class_interaction: g.value(ci).item(),
        ..LossParts::default()
    };
    let cls = g.add(ch, co)?;
    let mut total = g.add(cls, ci)?;

    if m > 0 {
        let rows: Vec<usize> = assignment.sigma[..m].to_vec();
        let target = |f: fn(&GroundTruthHoi) -> BBox| {
            Tensor::new(vec![m, 4], gts.iter().flat_map(|t| f(t).to_array()).collect()).expect("m x 4")
        };
        for (pred, tgt) in [
            (heads.human_boxes, target(|t| t.human_box)),
            (heads.object_boxes, target(|t| t.object_box)),
        ] {
            let p = g.gather_rows(pred, &rows)?;
            let t = g.constant(tgt);
            let (gl, l1) = box_losses(g, p, t)?;
            let k = w.beta_box * norm;
            let gl = g.scale(gl, k * w.giou_weight);
            let l1 = g.scale(l1, k * w.l1_weight);
            parts.giou += g.value(gl).item();
            parts.l1 += g.value(l1).item();
            total = g.add(total, gl)?;
            total = g.add(total, l1)?;
        }
    }
    parts.total = g.value(total).item();
    Ok(HoiLoss { total, parts })
}

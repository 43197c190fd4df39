//! Bipartite matching and the set-prediction loss.

use crate::boxes::{giou, BBox};
use crate::error::{Error, Result};
use crate::kernels::softplus;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Padding cost for rectangular problems.
pub const PAD_COST: f64 = 1e9;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `(prediction, ground truth)` pairs, sorted by prediction index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs (Kuhn–Munkres with
/// potentials on the matrix padded square with [`PAD_COST`]).
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("cost matrix rows differ in length"));
    }
    if cost.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::contract("cost matrix contains NaN"));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult::default());
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            PAD_COST
        }
    };
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] >= 1 && owner[j] - 1 < rows && j - 1 < cols)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(MatchResult { pairs })
}

/// Focal-style matching cost of predicting `logit` for a positive.
pub fn focal_class_cost(logit: f64) -> f64 {
    let p = crate::kernels::sigmoid(logit);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * softplus(-logit);
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * softplus(logit);
    pos - neg
}

/// `N × |GT|` matching cost from plain logits `[N, K]` and boxes `[N, 4]`.
pub fn pairwise_cost(logits: &Tensor, boxes: &Tensor, gt: &GroundTruth, w: &LossWeights) -> Vec<Vec<f64>> {
    let n = logits.shape()[0];
    (0..n)
        .map(|i| {
            let b = BBox::from_array(boxes.row(i).try_into().unwrap());
            gt.boxes
                .iter()
                .zip(&gt.labels)
                .map(|(&g, &label)| {
                    let l1: f64 = b.to_array().iter().zip(g.to_array()).map(|(a, c)| (a - c).abs()).sum();
                    w.cls * focal_class_cost(logits.row(i)[label]) + w.l1 * l1 + w.giou * (1.0 - giou(b, g))
                })
                .collect()
        })
        .collect()
}

/// Loss terms of one decoder layer, already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.l1 + self.giou
    }
}

/// Weighted set loss for one layer's predictions under a fixed matching,
/// normalized by `max(1, |GT|)`.
pub fn layer_loss(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    gt: &GroundTruth,
    m: &MatchResult,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let shape = tape.shape(logits).to_vec();
    let k = shape[1];
    let norm = 1.0 / gt.len().max(1) as f64;
    let mut targets = vec![0.0; shape[0] * k];
    for &(p, g) in &m.pairs {
        targets[p * k + gt.labels[g]] = 1.0;
    }
    let cls = tape.focal_loss(logits, targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let cls = tape.scale(cls, w.cls * norm);
    let mut terms = LossTerms {
        cls: tape.value(cls).item(),
        ..Default::default()
    };
    if m.pairs.is_empty() {
        return Ok((cls, terms));
    }
    let pred_idx: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<BBox> = m.pairs.iter().map(|p| gt.boxes[p.1]).collect();
    let matched = tape.gather_rows(boxes, &pred_idx)?;
    let tgt_t = tape.constant(Tensor::new(
        &[tgt.len(), 4],
        tgt.iter().flat_map(|b| b.to_array()).collect(),
    )?);
    let diff = tape.sub(matched, tgt_t)?;
    let diff = tape.abs(diff);
    let l1 = tape.sum(diff);
    let l1 = tape.scale(l1, w.l1 * norm);
    let gi = tape.giou_loss(matched, &tgt)?;
    let gi = tape.sum(gi);
    let gi = tape.scale(gi, w.giou * norm);
    terms.l1 = tape.value(l1).item();
    terms.giou = tape.value(gi).item();
    let total = tape.add(cls, l1)?;
    let total = tape.add(total, gi)?;
    Ok((total, terms))
}

/// Matches then scores one layer.
pub fn match_and_loss(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<(Var, LossTerms, MatchResult)> {
    let cost = pairwise_cost(tape.value(logits), tape.value(boxes), gt, w);
    let m = hungarian_match(&cost)?;
    let (loss, terms) = layer_loss(tape, logits, boxes, gt, &m, w)?;
    Ok((loss, terms, m))
}

/// Sum of per-layer losses (deep supervision, weight 1 each). The returned
/// terms are those of the final layer.
pub fn set_loss(
    tape: &mut Tape,
    layers: &[(Var, Var)],
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let mut total: Option<Var> = None;
    let mut last = LossTerms::default();
    for &(logits, boxes) in layers {
        let (l, terms, _) = match_and_loss(tape, logits, boxes, gt, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
        last = terms;
    }
    let total = total.ok_or_else(|| Error::contract("no predictions to score"))?;
    Ok((total, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over all injective assignments of the smaller side.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, need: usize, transpose: bool) -> f64 {
            if r == need {
                return 0.0;
            }
            let width = used.len();
            let mut best = f64::INFINITY;
            for c in 0..width {
                if used[c] {
                    continue;
                }
                used[c] = true;
                let v = if transpose { cost[c][r] } else { cost[r][c] };
                best = best.min(v + rec(cost, r + 1, used, need, transpose));
                used[c] = false;
            }
            best
        }
        if rows <= cols {
            rec(cost, 0, &mut vec![false; cols], rows, false)
        } else {
            rec(cost, 0, &mut vec![false; rows], cols, true)
        }
    }

    #[test]
    fn small_cases() {
        let m = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&[vec![1.0, 2.0], vec![2.0, 1.0]]), 2.0);
        assert_eq!(hungarian_match(&[vec![3.5]]).unwrap().pairs, vec![(0, 0)]);
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
        assert!(hungarian_match(&[vec![], vec![]]).unwrap().pairs.is_empty());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let r = rng.random_range(1..=6);
            let c = rng.random_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.random_range(0..5) as f64 * 0.5).collect())
                .collect();
            let m = hungarian_match(&cost).unwrap();
            assert_eq!(m.pairs.len(), r.min(c));
            assert_eq!(m.total_cost(&cost), brute_force(&cost));
        }
    }

    #[test]
    fn empty_ground_truth_gives_zero_columns() {
        let logits = Tensor::zeros(&[3, 2]);
        let boxes = Tensor::full(&[3, 4], 0.5);
        let cost = pairwise_cost(&logits, &boxes, &GroundTruth::default(), &LossWeights::default());
        assert_eq!(cost.len(), 3);
        assert!(cost.iter().all(Vec::is_empty));
    }

    #[test]
    fn exact_confident_prediction_dominates_its_column() {
        let gt = GroundTruth {
            boxes: vec![BBox::new(0.3, 0.4, 0.2, 0.2)],
            labels: vec![1],
        };
        let logits = Tensor::new(&[3, 2], vec![0.0, 0.0, -5.0, 8.0, 1.0, -1.0]).unwrap();
        let boxes = Tensor::new(
            &[3, 4],
            vec![0.6, 0.6, 0.3, 0.3, 0.3, 0.4, 0.2, 0.2, 0.31, 0.4, 0.2, 0.2],
        )
        .unwrap();
        let cost = pairwise_cost(&logits, &boxes, &gt, &LossWeights::default());
        assert!(cost[1][0] < cost[0][0] && cost[1][0] < cost[2][0]);
    }

    #[test]
    fn perfect_saturated_predictions_have_tiny_loss() {
        let gt = GroundTruth {
            boxes: vec![BBox::new(0.3, 0.4, 0.2, 0.2), BBox::new(0.7, 0.6, 0.3, 0.1)],
            labels: vec![0, 2],
        };
        let mut lg = vec![-12.0; 4 * 3];
        lg[0] = 12.0;
        lg[3 + 2] = 12.0;
        let mut bx = vec![0.5, 0.5, 0.1, 0.1, 0.5, 0.5, 0.1, 0.1];
        bx.splice(0..0, gt.boxes.iter().flat_map(|b| b.to_array()));
        let mut tape = Tape::inference();
        let logits = tape.constant(Tensor::new(&[4, 3], lg).unwrap());
        let boxes = tape.constant(Tensor::new(&[4, 4], bx).unwrap());
        let (loss, _) = set_loss(&mut tape, &[(logits, boxes)], &gt, &LossWeights::default()).unwrap();
        let v = tape.value(loss).item();
        assert!(v < 1e-3, "{v}");
    }
}

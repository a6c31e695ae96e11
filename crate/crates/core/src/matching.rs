//! Bipartite matching and the set-prediction loss.

use serde::{Deserialize, Serialize};

use crate::decoder::{PredictionGrads, StageOutput};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{giou, giou_backward, BoxXYXY};
use crate::tensor::Tensor;

/// Ground-truth objects of one image, in pixels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BoxXYXY>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return shape_err(format!("{} boxes but {} labels", boxes.len(), labels.len()));
        }
        Ok(Self { boxes, labels })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return shape_err("ground truth boxes and labels differ in length");
        }
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if l >= num_classes {
                return Err(Error::Input(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            if !(b.x2 > b.x1 && b.y2 > b.y1) || !b.to_array().iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!(
                    "ground truth box {b:?} must be canonical with positive area"
                )));
            }
        }
        Ok(())
    }
}

/// An optimal assignment. `pairs` holds `(prediction, ground truth)` sorted
/// by prediction index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    /// Sum of matched costs, accumulated in ground-truth order.
    pub cost: f64,
}

/// Relative slack used when deciding that two assignments tie.
const TIE_TOL: f64 = 1e-12;

/// Minimum-cost assignment of every ground-truth column to a distinct
/// prediction row. Among optimal assignments the one with the
/// lexicographically smallest sorted pair list is returned.
pub fn hungarian(cost: &Tensor) -> Result<MatchResult> {
    if cost.shape().len() != 2 {
        return shape_err(format!("cost must be 2-D, got {:?}", cost.shape()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    if n < m {
        return Err(Error::Input(format!("{n} predictions cannot cover {m} ground truths")));
    }
    if cost.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Value("NaN in cost matrix".into()));
    }
    if cost.data().iter().any(|v| v.is_infinite()) {
        return Err(Error::Value("infinite value in cost matrix".into()));
    }
    let at = |i: usize, j: usize| cost.data()[i * m + j];
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let (best, mut current) = solve(&at, &rows, &cols);
    let tol = TIE_TOL * (1.0 + best.abs());

    // Settle rows in ascending order: match the row to the smallest column
    // that still admits an optimal completion, otherwise leave it unmatched.
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_cost = 0.0;
    let mut free_cols = cols;
    for i in 0..n {
        if free_cols.is_empty() {
            break;
        }
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let current_j = current.iter().find(|(r, _)| *r == i).map(|p| p.1);
        let mut chosen = None;
        for &j in &free_cols {
            if Some(j) == current_j {
                chosen = Some((j, None));
                break;
            }
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            if rest_rows.len() < rest_cols.len() {
                continue;
            }
            let (sub, assign) = solve(&at, &rest_rows, &rest_cols);
            if fixed_cost + at(i, j) + sub <= best + tol {
                chosen = Some((j, Some(assign)));
                break;
            }
        }
        // With no workable column, `current` already leaves row i unmatched.
        if let Some((j, replacement)) = chosen {
            if let Some(assign) = replacement {
                current = assign;
            }
            fixed.push((i, j));
            fixed_cost += at(i, j);
            free_cols.retain(|&c| c != j);
        }
    }

    let matched: Vec<bool> = {
        let mut v = vec![false; n];
        for &(i, _) in &fixed {
            v[i] = true;
        }
        v
    };
    let mut by_col = fixed.clone();
    by_col.sort_by_key(|p| p.1);
    let total = by_col.iter().fold(0.0, |acc, &(i, j)| acc + at(i, j));
    Ok(MatchResult {
        pairs: fixed,
        unmatched: (0..n).filter(|&i| !matched[i]).collect(),
        cost: total,
    })
}

/// Shortest-augmenting-path assignment on the sub-matrix `rows × cols`
/// (`cols.len() <= rows.len()`). Returns the optimum and its pairs in
/// original indices.
fn solve(at: &impl Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
    // Columns of the matrix become the "left" side of size k ≤ n.
    let k = cols.len();
    let n = rows.len();
    if k == 0 {
        return (0.0, Vec::new());
    }
    let a = |l: usize, r: usize| at(rows[r - 1], cols[l - 1]);
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for l in 1..=k {
        owner[0] = l;
        let mut r0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[r0] = true;
            let l0 = owner[r0];
            let mut delta = f64::INFINITY;
            let mut r1 = 0;
            for r in 1..=n {
                if !used[r] {
                    let cur = a(l0, r) - u[l0] - v[r];
                    if cur < minv[r] {
                        minv[r] = cur;
                        way[r] = r0;
                    }
                    if minv[r] < delta {
                        delta = minv[r];
                        r1 = r;
                    }
                }
            }
            for r in 0..=n {
                if used[r] {
                    u[owner[r]] += delta;
                    v[r] -= delta;
                } else {
                    minv[r] -= delta;
                }
            }
            r0 = r1;
            if owner[r0] == 0 {
                break;
            }
        }
        loop {
            let r1 = way[r0];
            owner[r0] = owner[r1];
            r0 = r1;
            if r0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&r| owner[r] != 0)
        .map(|r| (rows[r - 1], cols[owner[r] - 1]))
        .collect();
    pairs.sort_by_key(|p| p.1);
    let total = pairs.iter().fold(0.0, |acc, &(i, j)| acc + at(i, j));
    pairs.sort_unstable();
    (total, pairs)
}

/// Focal loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Weights of the three loss terms (also used in the matching cost).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-class sigmoid focal loss summed over classes; `target` is the
/// positive class or `None` for background.
pub fn focal_loss(logits: &[f64], target: Option<usize>, gamma: f64, alpha: f64) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(c, &x)| {
            let p = sigmoid(x);
            if Some(c) == target {
                -alpha * (1.0 - p).powf(gamma) * log_sigmoid(x)
            } else {
                -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-x)
            }
        })
        .sum()
}

pub fn focal_loss_backward(logits: &[f64], target: Option<usize>, gamma: f64, alpha: f64) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(c, &x)| {
            let p = sigmoid(x);
            if Some(c) == target {
                let q = 1.0 - p;
                alpha * q.powf(gamma) * (gamma * p * log_sigmoid(x) - q)
            } else {
                (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_sigmoid(-x))
            }
        })
        .collect()
}

/// Classification matching cost: positive minus negative focal term of
/// the target class.
pub fn focal_class_cost(logit: f64, focal: FocalParams) -> f64 {
    let p = sigmoid(logit);
    let pos = -focal.alpha * (1.0 - p).powf(focal.gamma) * log_sigmoid(logit);
    let neg = -(1.0 - focal.alpha) * p.powf(focal.gamma) * log_sigmoid(-logit);
    pos - neg
}

/// `(cx, cy, w, h)` divided by image width/height.
pub fn normalized_cxcywh(b: &BoxXYXY, image: (f64, f64)) -> [f64; 4] {
    let (w, h) = image;
    [
        0.5 * (b.x1 + b.x2) / w,
        0.5 * (b.y1 + b.y2) / h,
        (b.x2 - b.x1) / w,
        (b.y2 - b.y1) / h,
    ]
}

fn l1_distance(a: &BoxXYXY, b: &BoxXYXY, image: (f64, f64)) -> f64 {
    let p = normalized_cxcywh(a, image);
    let t = normalized_cxcywh(b, image);
    p.iter().zip(&t).map(|(x, y)| (x - y).abs()).sum()
}

/// Gradient of the L1 distance with respect to the predicted xyxy box.
fn l1_backward(a: &BoxXYXY, b: &BoxXYXY, image: (f64, f64), scale: f64) -> [f64; 4] {
    let p = normalized_cxcywh(a, image);
    let t = normalized_cxcywh(b, image);
    let s: Vec<f64> = p.iter().zip(&t).map(|(x, y)| scale * sign(x - y)).collect();
    let (w, h) = image;
    [
        (0.5 * s[0] - s[2]) / w,
        (0.5 * s[1] - s[3]) / h,
        (0.5 * s[0] + s[2]) / w,
        (0.5 * s[1] + s[3]) / h,
    ]
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_preds(logits: &Tensor, boxes: &[BoxXYXY], gt: &GroundTruth, image: (f64, f64)) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != boxes.len() {
        return shape_err(format!(
            "logits {:?} do not match {} boxes",
            logits.shape(),
            boxes.len()
        ));
    }
    if !(image.0 > 0.0 && image.1 > 0.0) {
        return Err(Error::Input(format!("image size {image:?} must be positive")));
    }
    gt.validate(logits.cols())
}

/// Matching cost `[N × M]` between predictions and ground truths.
pub fn cost_matrix(
    logits: &Tensor,
    boxes: &[BoxXYXY],
    gt: &GroundTruth,
    image: (f64, f64),
    cfg: &LossConfig,
) -> Result<Tensor> {
    check_preds(logits, boxes, gt, image)?;
    let w = cfg.weights;
    let mut out = Tensor::zeros(&[boxes.len(), gt.len()]);
    for (i, b) in boxes.iter().enumerate() {
        for (j, (t, &label)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
            let cls = focal_class_cost(logits.get2(i, label), cfg.focal);
            let g = giou(b, t).value;
            out.data_mut()[i * gt.len() + j] = w.cls * cls + w.l1 * l1_distance(b, t, image) + w.giou * (1.0 - g);
        }
    }
    Ok(out)
}

/// [`cost_matrix`] for a stage's predictions.
pub fn match_cost(preds: &StageOutput, gt: &GroundTruth, image: (f64, f64), cfg: &LossConfig) -> Result<Tensor> {
    cost_matrix(&preds.logits, &preds.boxes, gt, image, cfg)
}

/// Loss components; `total = λ_cls·cls + λ_L1·l1 + λ_giou·giou`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    fn from_parts(cls: f64, l1: f64, giou: f64, w: &LossWeights) -> Self {
        Self {
            total: w.cls * cls + w.l1 * l1 + w.giou * giou,
            cls,
            l1,
            giou,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.l1, self.giou].iter().all(|v| v.is_finite())
    }
}

/// Loss of one stage together with its gradients and matching.
#[derive(Debug, Clone)]
pub struct StageLoss {
    pub breakdown: LossBreakdown,
    pub grads: PredictionGrads,
    pub matching: MatchResult,
}

/// Matches one stage's predictions and evaluates its loss. Every component
/// is normalized by `max(M, 1)`.
pub fn stage_loss(
    logits: &Tensor,
    boxes: &[BoxXYXY],
    gt: &GroundTruth,
    image: (f64, f64),
    cfg: &LossConfig,
) -> Result<StageLoss> {
    let cost = cost_matrix(logits, boxes, gt, image, cfg)?;
    let matching = hungarian(&cost)?;
    let norm = 1.0 / gt.len().max(1) as f64;
    let n = boxes.len();
    let mut target = vec![None; n];
    for &(i, j) in &matching.pairs {
        target[i] = Some(gt.labels[j]);
    }
    let FocalParams { gamma, alpha } = cfg.focal;
    let w = cfg.weights;

    let mut grad_logits = Tensor::zeros(logits.shape());
    let mut cls = 0.0;
    for (i, t) in target.iter().enumerate() {
        cls += focal_loss(logits.row(i), *t, gamma, alpha);
        let g = focal_loss_backward(logits.row(i), *t, gamma, alpha);
        for (d, v) in grad_logits.row_mut(i).iter_mut().zip(g) {
            *d = w.cls * norm * v;
        }
    }
    let mut l1 = 0.0;
    let mut giou_sum = 0.0;
    let mut grad_boxes = vec![[0.0; 4]; n];
    for &(i, j) in &matching.pairs {
        let (b, t) = (&boxes[i], &gt.boxes[j]);
        l1 += l1_distance(b, t, image);
        giou_sum += 1.0 - giou(b, t).value;
        let gl = l1_backward(b, t, image, w.l1 * norm);
        let (gg, _) = giou_backward(b, t);
        for k in 0..4 {
            grad_boxes[i][k] += gl[k] - w.giou * norm * gg[k];
        }
    }
    Ok(StageLoss {
        breakdown: LossBreakdown::from_parts(cls * norm, l1 * norm, giou_sum * norm, &w),
        grads: PredictionGrads {
            logits: grad_logits,
            boxes: grad_boxes,
        },
        matching,
    })
}

/// Loss over all stages: each stage matched independently, components
/// averaged across stages.
#[derive(Debug, Clone)]
pub struct SetLoss {
    pub breakdown: LossBreakdown,
    pub stages: Vec<StageLoss>,
}

impl SetLoss {
    /// Gradients of `breakdown.total` per stage.
    pub fn prediction_grads(&self) -> Vec<PredictionGrads> {
        self.stages.iter().map(|s| s.grads.clone()).collect()
    }
}

pub fn set_loss(outputs: &[StageOutput], gt: &GroundTruth, image: (f64, f64), cfg: &LossConfig) -> Result<SetLoss> {
    if outputs.is_empty() {
        return shape_err("set loss needs at least one stage output");
    }
    let scale = 1.0 / outputs.len() as f64;
    let mut stages = Vec::with_capacity(outputs.len());
    let (mut cls, mut l1, mut gi) = (0.0, 0.0, 0.0);
    for out in outputs {
        let mut s = stage_loss(&out.logits, &out.boxes, gt, image, cfg)?;
        cls += scale * s.breakdown.cls;
        l1 += scale * s.breakdown.l1;
        gi += scale * s.breakdown.giou;
        s.grads.logits.scale(scale);
        for b in &mut s.grads.boxes {
            for v in b.iter_mut() {
                *v *= scale;
            }
        }
        stages.push(s);
    }
    Ok(SetLoss {
        breakdown: LossBreakdown::from_parts(cls, l1, gi, &cfg.weights),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hungarian_small_cases() {
        let r = hungarian(&t(&[&[0.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.cost, 0.0);
        let r = hungarian(&t(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.cost, 2.0);
        let r = hungarian(&t(&[&[5.0], &[1.0], &[3.0]])).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.unmatched, vec![0, 2]);
    }

    #[test]
    fn hungarian_ties_pick_smallest_pair_list() {
        let r = hungarian(&t(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = hungarian(&t(&[&[2.0], &[2.0], &[2.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        let r = hungarian(&Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = hungarian(&t(&[&[9.0, 1.0], &[1.0, 9.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(r.cost, 2.0);
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn hungarian_errors() {
        assert!(matches!(hungarian(&Tensor::zeros(&[1, 2])), Err(Error::Input(_))));
        assert!(matches!(hungarian(&t(&[&[f64::NAN]])), Err(Error::Value(_))));
        let r = hungarian(&Tensor::zeros(&[3, 0])).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched, vec![0, 1, 2]);
    }

    #[test]
    fn focal_examples() {
        let l = focal_loss(&[0.0], Some(0), 2.0, 0.25);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        let x = [0.3, -1.2, 2.0];
        let bce: f64 = x
            .iter()
            .enumerate()
            .map(|(c, &v): (usize, &f64)| {
                let p = 1.0 / (1.0 + (-v).exp());
                if c == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        assert!((focal_loss(&x, Some(1), 0.0, 0.5) - 0.5 * bce).abs() < 1e-12);
        assert!(focal_loss(&[60.0, -60.0], Some(0), 2.0, 0.25) < 1e-20);
        assert!(focal_loss(&[800.0, -800.0], Some(0), 2.0, 0.25).is_finite());
    }

    #[test]
    fn focal_backward_matches_difference() {
        let x = [0.7, -0.4, 1.9];
        for target in [None, Some(0), Some(2)] {
            for gamma in [0.0, 2.0] {
                let g = focal_loss_backward(&x, target, gamma, 0.25);
                for c in 0..3 {
                    let h = 1e-6;
                    let mut a = x;
                    let mut b = x;
                    a[c] += h;
                    b[c] -= h;
                    let fd = (focal_loss(&a, target, gamma, 0.25) - focal_loss(&b, target, gamma, 0.25)) / (2.0 * h);
                    assert!((fd - g[c]).abs() < 1e-8, "{target:?} {gamma} {c}");
                }
            }
        }
    }

    #[test]
    fn empty_ground_truth_is_classification_only() {
        let logits = t(&[&[0.2, -0.1], &[1.0, 0.5]]);
        let boxes = vec![BoxXYXY::new(0.0, 0.0, 4.0, 4.0); 2];
        let cfg = LossConfig::default();
        let s = stage_loss(&logits, &boxes, &GroundTruth::default(), (16.0, 16.0), &cfg).unwrap();
        assert_eq!(s.breakdown.l1, 0.0);
        assert_eq!(s.breakdown.giou, 0.0);
        assert_eq!(s.breakdown.total, 2.0 * s.breakdown.cls);
        assert!(s.grads.boxes.iter().all(|b| *b == [0.0; 4]));
    }

    #[test]
    fn exact_predictions_have_no_box_loss() {
        let gt = GroundTruth::new(vec![BoxXYXY::new(2.0, 3.0, 10.0, 12.0)], vec![1]).unwrap();
        let logits = t(&[&[-9.0, 9.0], &[0.0, 0.0]]);
        let boxes = vec![gt.boxes[0], BoxXYXY::new(0.0, 0.0, 16.0, 16.0)];
        let s = stage_loss(&logits, &boxes, &gt, (16.0, 16.0), &LossConfig::default()).unwrap();
        assert_eq!(s.matching.pairs, vec![(0, 0)]);
        assert!(s.breakdown.l1.abs() < 1e-15);
        assert!(s.breakdown.giou.abs() < 1e-15);
    }
}

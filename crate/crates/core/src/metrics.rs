//! Precision/recall, F-beta, maximum F over a threshold sweep, and mask mAP.

use serde::{Deserialize, Serialize};

use crate::codec::{check_threshold, pixel_scores, ConnectivityCube};
use crate::error::{ensure, Result};
use crate::grid::BinaryMask;

/// Weight of precision in F-beta.
pub const BETA2: f64 = 0.3;
/// Default number of sweep thresholds.
pub const DEFAULT_GRID: usize = 256;
pub const DEFAULT_IOU: f64 = 0.5;

pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&precision) && (0.0..=1.0).contains(&recall),
        InvalidArgument,
        "precision {precision} and recall {recall} must lie in [0, 1]"
    );
    ensure!(beta2 > 0.0, InvalidArgument, "beta^2 must be positive, got {beta2}");
    let den = beta2 * precision + recall;
    Ok(if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    })
}

/// `n` uniform midpoints `(i + 0.5) / n`.
pub fn threshold_grid(n: usize) -> Result<Vec<f64>> {
    ensure!(n >= 1, InvalidArgument, "threshold grid needs at least one point");
    Ok((0..n).map(|i| (i as f64 + 0.5) / n as f64).collect())
}

/// Pixel precision and recall. An empty prediction has precision 1 only when the
/// ground truth is empty too; an empty ground truth has recall 1.
pub fn precision_recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    same_size(pred, gt)?;
    let tp = pred.data().iter().zip(gt.data()).filter(|(&p, &g)| p && g).count();
    Ok(counts_to_pr(tp, pred.count_salient(), gt.count_salient()))
}

fn counts_to_pr(tp: usize, pred: usize, gt: usize) -> (f64, f64) {
    let precision = if pred == 0 {
        if gt == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / pred as f64
    };
    let recall = if gt == 0 { 1.0 } else { tp as f64 / gt as f64 };
    (precision, recall)
}

fn same_size(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    ensure!(
        a.height() == b.height() && a.width() == b.width(),
        ShapeMismatch,
        "masks are {}x{} and {}x{}",
        a.height(),
        a.width(),
        b.height(),
        b.width()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

/// A continuous prediction that binarizes as `score > t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl ScoreMap {
    /// Saliency probabilities in [0, 1], row-major.
    pub fn saliency(height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        ensure!(
            scores.len() == height * width,
            ShapeMismatch,
            "{height}x{width} saliency map needs {} values, got {}",
            height * width,
            scores.len()
        );
        ensure!(
            scores.iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidArgument,
            "saliency values must lie in [0, 1]"
        );
        Ok(Self { height, width, scores })
    }

    /// Connectivity probabilities; `score > t` reproduces `decode(cube, t, 1)`.
    pub fn connectivity(cube: &ConnectivityCube) -> Self {
        Self {
            height: cube.height(),
            width: cube.width(),
            scores: pixel_scores(cube, 1).expect("k = 1 is always valid"),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn binarize(&self, t: f64) -> Result<BinaryMask> {
        check_threshold(t)?;
        BinaryMask::new(
            self.height,
            self.width,
            self.scores.iter().map(|&s| f64::from(s) > t).collect(),
        )
    }

    /// (true positives, predicted positives) at each threshold.
    fn sweep_counts(&self, gt: &BinaryMask, grid: &[f64]) -> Result<Vec<(usize, usize)>> {
        ensure!(
            self.height == gt.height() && self.width == gt.width(),
            ShapeMismatch,
            "prediction is {}x{}, ground truth is {}x{}",
            self.height,
            self.width,
            gt.height(),
            gt.width()
        );
        grid.iter().try_for_each(|&t| check_threshold(t))?;
        Ok(grid
            .iter()
            .map(|&t| {
                let mut tp = 0;
                let mut pos = 0;
                for (&s, &g) in self.scores.iter().zip(gt.data()) {
                    if f64::from(s) > t {
                        pos += 1;
                        tp += g as usize;
                    }
                }
                (tp, pos)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxF {
    #[serde(rename = "maxF")]
    pub max_f: f64,
    pub best_t: f64,
    pub curve: Vec<PRPoint>,
}

fn best_point(curve: &[PRPoint]) -> (f64, f64) {
    curve
        .iter()
        .fold((f64::NEG_INFINITY, 0.0), |(f, t), p| if p.f_beta > f { (p.f_beta, p.threshold) } else { (f, t) })
}

fn make_curve(grid: &[f64], pr: impl Iterator<Item = (f64, f64)>) -> Result<Vec<PRPoint>> {
    grid.iter()
        .zip(pr)
        .map(|(&threshold, (precision, recall))| {
            Ok(PRPoint {
                threshold,
                precision,
                recall,
                f_beta: f_beta(precision, recall, BETA2)?,
            })
        })
        .collect()
}

/// Maximum F-beta of a single prediction over `grid`.
pub fn max_f_measure(pred: &ScoreMap, gt: &BinaryMask, grid: &[f64]) -> Result<MaxF> {
    let gt_pos = gt.count_salient();
    let counts = pred.sweep_counts(gt, grid)?;
    let curve = make_curve(grid, counts.iter().map(|&(tp, pos)| counts_to_pr(tp, pos, gt_pos)))?;
    let (max_f, best_t) = best_point(&curve);
    Ok(MaxF { max_f, best_t, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    #[serde(rename = "maxF")]
    pub max_f: f64,
    pub best_t: f64,
}

/// Dataset-level sweep: P and R are averaged over images per threshold and F is
/// taken from the averages. `mean_image_max_f` is the per-image alternative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    #[serde(rename = "maxF")]
    pub max_f: f64,
    pub best_t: f64,
    #[serde(rename = "mean_image_maxF")]
    pub mean_image_max_f: f64,
    pub per_threshold: Vec<PRPoint>,
    pub per_image: Vec<ImageScore>,
}

pub fn evaluate_dataset(items: &[(String, ScoreMap, BinaryMask)], grid: &[f64]) -> Result<DatasetEval> {
    ensure!(!items.is_empty(), InvalidArgument, "cannot evaluate an empty dataset");
    let mut sum_p = vec![0.0; grid.len()];
    let mut sum_r = vec![0.0; grid.len()];
    let mut per_image = Vec::with_capacity(items.len());
    for (name, pred, gt) in items {
        let single = max_f_measure(pred, gt, grid)?;
        for (i, p) in single.curve.iter().enumerate() {
            sum_p[i] += p.precision;
            sum_r[i] += p.recall;
        }
        per_image.push(ImageScore {
            name: name.clone(),
            max_f: single.max_f,
            best_t: single.best_t,
        });
    }
    let n = items.len() as f64;
    let per_threshold = make_curve(grid, sum_p.iter().zip(&sum_r).map(|(p, r)| (p / n, r / n)))?;
    let (max_f, best_t) = best_point(&per_threshold);
    let mean_image_max_f = per_image.iter().map(|s| s.max_f).sum::<f64>() / n;
    Ok(DatasetEval {
        max_f,
        best_t,
        mean_image_max_f,
        per_threshold,
        per_image,
    })
}

/// |A∩B| / |A∪B|; two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_size(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Scored instance predictions and ground-truth instances of one image.
#[derive(Debug, Clone, Default)]
pub struct InstanceSet {
    pub predictions: Vec<(BinaryMask, f64)>,
    pub ground_truth: Vec<BinaryMask>,
}

impl InstanceSet {
    fn validate(&self) -> Result<()> {
        let first = self
            .ground_truth
            .first()
            .or_else(|| self.predictions.first().map(|(m, _)| m));
        if let Some(first) = first {
            for m in self.ground_truth.iter().chain(self.predictions.iter().map(|(m, _)| m)) {
                same_size(first, m)?;
            }
        }
        ensure!(
            self.predictions.iter().all(|(_, s)| s.is_finite()),
            InvalidArgument,
            "instance confidences must be finite"
        );
        Ok(())
    }

    /// True/false positive flags per prediction, highest confidence first
    /// (ties keep input order), with greedy best-IoU matching.
    fn matches(&self, iou_threshold: f64) -> Result<Vec<(f64, bool)>> {
        let mut order: Vec<usize> = (0..self.predictions.len()).collect();
        order.sort_by(|&a, &b| self.predictions[b].1.total_cmp(&self.predictions[a].1).then(a.cmp(&b)));
        let mut taken = vec![false; self.ground_truth.len()];
        let mut out = Vec::with_capacity(order.len());
        for i in order {
            let (mask, score) = &self.predictions[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in self.ground_truth.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(mask, gt)?;
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            out.push((*score, best.is_some()));
        }
        Ok(out)
    }
}

/// All-point interpolated area under the precision/recall staircase.
fn average_precision_from(flags: &[bool], total_gt: usize, total_pred: usize) -> f64 {
    if total_gt == 0 {
        return if total_pred == 0 { 1.0 } else { 0.0 };
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Average precision of one image's instance predictions.
pub fn map_r(set: &InstanceSet, iou_threshold: f64) -> Result<f64> {
    map_r_dataset(std::slice::from_ref(set), iou_threshold)
}

/// Average precision with detections pooled over all images.
pub fn map_r_dataset(sets: &[InstanceSet], iou_threshold: f64) -> Result<f64> {
    ensure!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        InvalidArgument,
        "IoU threshold {iou_threshold} must lie in (0, 1]"
    );
    let mut pooled = Vec::new();
    let mut total_gt = 0;
    for set in sets {
        set.validate()?;
        total_gt += set.ground_truth.len();
        pooled.extend(set.matches(iou_threshold)?);
    }
    // stable sort keeps image order, then per-image rank, for equal confidences
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = pooled.iter().map(|&(_, hit)| hit).collect();
    Ok(average_precision_from(&flags, total_gt, flags.len()))
}

/// Connected components of a mask under 8-connectivity, largest first, each
/// scored by the mean of `scores` over its pixels.
pub fn mask_instances(mask: &BinaryMask, scores: &[f32]) -> Result<Vec<(BinaryMask, f64)>> {
    let (h, w) = (mask.height(), mask.width());
    ensure!(scores.len() == h * w, ShapeMismatch, "score map has {} values, mask {}", scores.len(), h * w);
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.data()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        label[start] = id;
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.data()[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        let score = pixels.iter().map(|&p| f64::from(scores[p])).sum::<f64>() / pixels.len() as f64;
        let mut m = BinaryMask::empty(h, w)?;
        for p in pixels {
            m.set(p / w, p % w, true);
        }
        out.push((m, score));
    }
    out.sort_by_key(|(m, _)| std::cmp::Reverse(m.count_salient()));
    Ok(out)
}

//! Evaluation protocol: IoU matching, precision/recall, all-point AP/mAP,
//! accuracy, confusion matrices and k-fold cross validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rank_by_score, BBox};

/// Default IoU a detection needs to count as a true positive.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// True-positive flag per detection, in input order.
    pub flags: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Greedy matching in descending confidence: each detection takes the
/// unmatched ground truth it overlaps most, if that IoU reaches
/// `iou_threshold`. Every ground truth is matched at most once.
pub fn match_detections(detections: &[(BBox, f64)], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = detections.iter().map(|d| d.1).collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; detections.len()];
    let mut matched_gt = vec![None; detections.len()];
    for i in rank_by_score(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = detections[i].0.iou(g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
            matched_gt[i] = Some(j);
        }
    }
    let tp = flags.iter().filter(|&&f| f).count();
    MatchResult {
        flags,
        matched_gt,
        true_positives: tp,
        false_positives: detections.len() - tp,
        false_negatives: gts.len() - tp,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall after each detection in confidence order.
pub fn precision_recall_curve(flags: &[bool], confidences: &[f64], total_gt: usize) -> Vec<PrPoint> {
    assert_eq!(flags.len(), confidences.len(), "flags and confidences differ in length");
    let mut tp = 0usize;
    rank_by_score(confidences)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            tp += usize::from(flags[i]);
            PrPoint {
                recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
                precision: tp as f64 / (rank + 1) as f64,
            }
        })
        .collect()
}

/// Area under the precision envelope (all-point interpolation). Zero when
/// there are no ground truths.
pub fn average_precision(flags: &[bool], confidences: &[f64], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let curve = precision_recall_curve(flags, confidences, total_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            area += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    area.clamp(0.0, 1.0)
}

/// Per-image detections and ground truths pooled across a dataset for one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDetectionEval {
    pub ap: f64,
    pub total_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub pr_points: Vec<PrPoint>,
}

pub fn evaluate_class(images: &[(Vec<(BBox, f64)>, Vec<BBox>)], iou_threshold: f64) -> ClassDetectionEval {
    let mut flags = Vec::new();
    let mut confs = Vec::new();
    let mut total_gt = 0;
    for (dets, gts) in images {
        let m = match_detections(dets, gts, iou_threshold);
        flags.extend(m.flags);
        confs.extend(dets.iter().map(|d| d.1));
        total_gt += gts.len();
    }
    let tp = flags.iter().filter(|&&f| f).count();
    ClassDetectionEval {
        ap: average_precision(&flags, &confs, total_gt),
        total_gt,
        true_positives: tp,
        false_positives: flags.len() - tp,
        pr_points: precision_recall_curve(&flags, &confs, total_gt),
    }
}

/// Mean AP over classes that have ground truth.
pub fn mean_average_precision<'a>(per_class: impl IntoIterator<Item = &'a ClassDetectionEval>) -> f64 {
    let aps: Vec<f64> = per_class.into_iter().filter(|c| c.total_gt > 0).map(|c| c.ap).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_predictions(classes: Vec<String>, predictions: &[usize], labels: &[usize]) -> Result<Self> {
        let mut m = Self::new(classes);
        for (&p, &l) in predictions.iter().zip(labels) {
            m.record(l, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.classes.len();
        if truth >= n || predicted >= n {
            return Err(Error::invalid(format!("class index out of range for {n} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion matrices have different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> usize {
        self.row_sums().iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: usize = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }
}

/// Mean and sample standard deviation of per-fold values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    /// Values in `[0, 1]` rendered as percentages, e.g. `84.30 ± 2.36`.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Disjoint validation folds covering `0..n`; sizes differ by at most one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub n: usize,
    pub validation: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.validation[fold]
    }

    /// All indices outside `fold`, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .validation
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        t.sort_unstable();
        t
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        self.validation.iter().map(Vec::len).collect()
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || n < k {
        return Err(Error::invalid(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut validation = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        validation.push(fold);
        start += len;
    }
    Ok(FoldPlan { k, seed, n, validation })
}

/// What one fold's evaluation produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_validation: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_class: BTreeMap<String, ClassDetectionEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub folds: Vec<FoldMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MeanStd>,
    /// Per-class AP aggregated over folds.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub ap: BTreeMap<String, MeanStd>,
    /// Confusion matrix summed over folds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl EvalReport {
    /// Aggregates per-fold metrics; each aggregate must be present in every
    /// fold or in none.
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Result<Self> {
        let k = folds.len();
        let collect = |get: &dyn Fn(&FoldMetrics) -> Option<f64>, what: &str| -> Result<Option<MeanStd>> {
            let vals: Vec<f64> = folds.iter().filter_map(get).collect();
            match vals.len() {
                0 => Ok(None),
                n if n == k => Ok(Some(MeanStd::from_values(&vals))),
                _ => Err(Error::invalid(format!("{what} missing in some folds"))),
            }
        };
        let accuracy = collect(&|f| f.accuracy, "accuracy")?;
        let map = collect(&|f| f.map, "mAP")?;
        let mut ap = BTreeMap::new();
        for class in folds.first().map(|f| f.per_class.keys().cloned().collect::<Vec<_>>()).unwrap_or_default() {
            if let Some(ms) = collect(&|f| f.per_class.get(&class).map(|c| c.ap), &class)? {
                ap.insert(class, ms);
            }
        }
        let mut confusion: Option<ConfusionMatrix> = None;
        for f in &folds {
            if let Some(c) = &f.confusion {
                match confusion.as_mut() {
                    Some(acc) => acc.merge(c)?,
                    None => confusion = Some(c.clone()),
                }
            }
        }
        Ok(Self {
            k,
            folds,
            accuracy,
            map,
            ap,
            confusion,
        })
    }

    /// `fold,class,rank,recall,precision` rows for external plotting.
    pub fn pr_points_csv(&self) -> String {
        let mut out = String::from("fold,class,rank,recall,precision\n");
        for f in &self.folds {
            for (class, eval) in &f.per_class {
                for (rank, p) in eval.pr_points.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{},{}\n", f.fold, class, rank + 1, p.recall, p.precision));
                }
            }
        }
        out
    }
}

/// Runs `train_fn` on every fold's training indices and `eval_fn` on the
/// resulting model with the validation indices, sequentially in fold order.
pub fn cross_validate<M>(
    plan: &FoldPlan,
    mut train_fn: impl FnMut(usize, &[usize]) -> Result<M>,
    mut eval_fn: impl FnMut(usize, &mut M, &[usize]) -> Result<FoldMetrics>,
) -> Result<EvalReport> {
    let mut folds = Vec::with_capacity(plan.k);
    for f in 0..plan.k {
        let train = plan.train(f);
        let val = plan.validation(f);
        let mut model = train_fn(f, &train)?;
        let mut m = eval_fn(f, &mut model, val)?;
        m.fold = f;
        m.n_train = train.len();
        m.n_validation = val.len();
        folds.push(m);
    }
    EvalReport::from_folds(folds)
}

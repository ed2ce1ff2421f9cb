//! Anchor grid generation and training-target assignment.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode, BBox, BoxDelta};

/// Anchor shapes tiled at every feature cell: `sizes.len() × ratios.len()`
/// anchors per cell. A ratio `(fw, fh)` gives an anchor `size·fw` wide and
/// `size·fh` tall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub sizes: Vec<f64>,
    pub ratios: Vec<(f64, f64)>,
    pub stride: usize,
}

impl Default for AnchorSpec {
    /// Sizes 32..256 with four ratios, 16 anchors per cell at stride 32.
    fn default() -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            sizes: vec![32.0, 64.0, 128.0, 256.0],
            ratios: vec![(1.0, 1.0), (r, 2.0 * r), (2.0 * r, r), (2.0, 2.0)],
            stride: 32,
        }
    }
}

impl AnchorSpec {
    /// The 3 sizes × 3 ratios variant.
    pub fn nine() -> Self {
        Self {
            sizes: vec![128.0, 256.0, 512.0],
            ratios: vec![(1.0, 1.0), (2.0, 1.0), (1.0, 2.0)],
            stride: 32,
        }
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.ratios.is_empty() {
            return Err(Error::invalid("anchor spec needs at least one size and one ratio"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("anchor stride must be positive"));
        }
        let bad_size = self.sizes.iter().any(|s| !(s.is_finite() && *s > 0.0));
        let bad_ratio = self
            .ratios
            .iter()
            .any(|(w, h)| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0));
        if bad_size || bad_ratio {
            return Err(Error::invalid("anchor sizes and ratio factors must be positive"));
        }
        Ok(())
    }
}

/// Anchors in row-major cell order, then size, then ratio:
/// index `((row·W + col)·S + s)·R + r`.
pub fn generate_anchors(spec: &AnchorSpec, feature_h: usize, feature_w: usize) -> Result<Vec<BBox>> {
    spec.validate()?;
    if feature_h == 0 || feature_w == 0 {
        return Err(Error::invalid(format!("feature map {feature_h}x{feature_w} is empty")));
    }
    let stride = spec.stride as f64;
    let mut out = Vec::with_capacity(feature_h * feature_w * spec.per_cell());
    for row in 0..feature_h {
        for col in 0..feature_w {
            let cx = (col as f64 + 0.5) * stride;
            let cy = (row as f64 + 0.5) * stride;
            for &size in &spec.sizes {
                for &(fw, fh) in &spec.ratios {
                    out.push(BBox::from_center(cx, cy, size * fw, size * fh));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Ground truth each positive anchor regresses to.
    pub matched_gt: Vec<Option<usize>>,
    /// Regression target for every positive anchor (`None` elsewhere).
    pub deltas: Vec<Option<BoxDelta>>,
    /// Minibatch anchor indices, ascending.
    pub sampled: Vec<usize>,
}

impl RpnTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }

    pub fn sampled_positives(&self) -> usize {
        self.sampled
            .iter()
            .filter(|&&i| self.labels[i] == AnchorLabel::Positive)
            .count()
    }
}

/// Per box: highest IoU with any ground truth and its index (lowest on ties).
pub fn max_iou_per_box(boxes: &[BBox], gts: &[BBox]) -> Vec<(f64, Option<usize>)> {
    boxes
        .iter()
        .map(|b| {
            gts.iter()
                .enumerate()
                .fold((0.0, None), |(best, arg), (j, g)| {
                    let v = b.iou(g);
                    if arg.is_none() || v > best {
                        (v, Some(j))
                    } else {
                        (best, arg)
                    }
                })
        })
        .collect()
}

/// Label anchors against ground truths and draw the training minibatch.
///
/// Positive: max IoU above `hi`, or the best anchor for some ground truth.
/// Negative: max IoU below `lo`. Everything else is ignored. The minibatch
/// holds up to `⌈n_cls/2⌉` positives, filled up to `n_cls` with negatives.
pub fn assign_rpn_targets(
    anchors: &[BBox],
    gts: &[BBox],
    lo: f64,
    hi: f64,
    n_cls: usize,
    rng_seed: u64,
) -> Result<RpnTargets> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!("need 0 <= lo < hi <= 1, got lo={lo} hi={hi}")));
    }
    let best = max_iou_per_box(anchors, gts);
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(v, arg)| match arg {
            Some(_) if v > hi => AnchorLabel::Positive,
            _ if v < lo => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        })
        .collect();
    let mut matched_gt: Vec<Option<usize>> = best
        .iter()
        .zip(&labels)
        .map(|(&(_, arg), l)| if *l == AnchorLabel::Positive { arg } else { None })
        .collect();

    // Coverage: each ground truth claims its best anchor.
    for (j, g) in gts.iter().enumerate() {
        let mut arg = None;
        let mut best_v = f64::NEG_INFINITY;
        for (i, a) in anchors.iter().enumerate() {
            let v = a.iou(g);
            if v > best_v {
                best_v = v;
                arg = Some(i);
            }
        }
        if let Some(i) = arg {
            labels[i] = AnchorLabel::Positive;
            // anchors already positive by threshold keep their best match
            if best[i].0 <= hi {
                matched_gt[i] = Some(j);
            }
        }
    }

    let deltas = anchors
        .iter()
        .zip(&matched_gt)
        .map(|(a, m)| m.map(|j| encode(a, &gts[j])))
        .collect();
    let sampled = sample_minibatch(&labels, n_cls, n_cls.div_ceil(2), rng_seed);
    Ok(RpnTargets {
        labels,
        matched_gt,
        deltas,
        sampled,
    })
}

/// Uniform sampling without replacement: up to `max_pos` positives, then
/// negatives up to `batch` total. Returned indices are ascending.
pub fn sample_minibatch(labels: &[AnchorLabel], batch: usize, max_pos: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |pool: Vec<usize>, n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if pool.len() <= n {
            return pool;
        }
        sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect()
    };
    let by = |want: AnchorLabel| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == want)
            .map(|(i, _)| i)
            .collect()
    };
    let pos = pick(by(AnchorLabel::Positive), max_pos.min(batch), &mut rng);
    let neg = pick(by(AnchorLabel::Negative), batch - pos.len(), &mut rng);
    let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    pub labels: Vec<AnchorLabel>,
    pub matched_gt: Vec<Option<usize>>,
    pub sampled: Vec<usize>,
}

/// Second-stage targets: a region is foreground when its best IoU with a
/// ground truth is at least `fg_iou`, background otherwise.
pub fn assign_roi_targets(
    rois: &[BBox],
    gts: &[BBox],
    fg_iou: f64,
    batch: usize,
    max_pos: usize,
    seed: u64,
) -> RoiTargets {
    let best = max_iou_per_box(rois, gts);
    let labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(v, arg)| {
            if arg.is_some() && v >= fg_iou {
                AnchorLabel::Positive
            } else {
                AnchorLabel::Negative
            }
        })
        .collect();
    let matched_gt = best
        .iter()
        .zip(&labels)
        .map(|(&(_, arg), l)| if *l == AnchorLabel::Positive { arg } else { None })
        .collect();
    let sampled = sample_minibatch(&labels, batch, max_pos, seed);
    RoiTargets {
        labels,
        matched_gt,
        sampled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn default_spec_gives_4800_on_20x15() {
        let anchors = generate_anchors(&AnchorSpec::default(), 15, 20).unwrap();
        assert_eq!(anchors.len(), 4800);
    }

    #[test]
    fn single_cell_single_anchor() {
        let spec = AnchorSpec {
            sizes: vec![32.0],
            ratios: vec![(1.0, 1.0)],
            stride: 32,
        };
        let a = generate_anchors(&spec, 1, 1).unwrap();
        assert_eq!(a, vec![BBox { x1: 0.0, y1: 0.0, x2: 32.0, y2: 32.0 }]);
        assert_eq!(a[0].center(), (16.0, 16.0));
    }

    #[test]
    fn two_by_three_grid() {
        let spec = AnchorSpec::default();
        let a = generate_anchors(&spec, 2, 3).unwrap();
        assert_eq!(a.len(), 96);
        // hand enumeration: cell (row, col) owns anchors [16k, 16k+16)
        let expected_centers = [(16.0, 16.0), (48.0, 16.0), (80.0, 16.0), (16.0, 48.0), (48.0, 48.0), (80.0, 48.0)];
        for (k, c) in expected_centers.iter().enumerate() {
            for anchor in &a[16 * k..16 * (k + 1)] {
                let (x, y) = anchor.center();
                assert!((x - c.0).abs() < 1e-9 && (y - c.1).abs() < 1e-9);
            }
        }
        // the (2, 2) factor at size s repeats the (1, 1) anchor at 2s, so
        // each cell holds 13 distinct boxes
        let mut distinct = 0;
        for i in 0..a.len() {
            distinct += usize::from(!a[..i].contains(&a[i]));
        }
        assert_eq!(distinct, 6 * 13);
        assert_eq!(a[3], a[4]);
        // size-major, ratio-minor within a cell
        assert!((a[1].width() - 32.0 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((a[4].width() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = AnchorSpec {
            sizes: vec![],
            ..AnchorSpec::default()
        };
        assert!(generate_anchors(&spec, 2, 2).is_err());
        assert!(generate_anchors(&AnchorSpec::default(), 0, 2).is_err());
    }

    #[test]
    fn nine_variant() {
        let a = generate_anchors(&AnchorSpec::nine(), 15, 20).unwrap();
        assert_eq!(a.len(), 2700);
    }

    #[test]
    fn exact_matches_are_positive_with_zero_deltas() {
        let anchors = generate_anchors(&AnchorSpec::default(), 3, 3).unwrap();
        let gts = vec![anchors[5], anchors[40]];
        let t = assign_rpn_targets(&anchors, &gts, 0.4, 0.8, 256, 1).unwrap();
        for (i, g) in [(5usize, 0usize), (40, 1)] {
            assert_eq!(t.labels[i], AnchorLabel::Positive);
            assert_eq!(t.matched_gt[i], Some(g));
            assert_eq!(t.deltas[i], Some(BoxDelta::default()));
        }
    }

    #[test]
    fn far_ground_truth_still_gets_its_best_anchor() {
        let anchors = generate_anchors(&AnchorSpec::default(), 2, 2).unwrap();
        // thin sliver: IoU with every anchor is below 0.4
        let gt = BBox::new(10.0, 10.0, 12.0, 60.0).unwrap();
        let best = anchors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.iou(&gt).total_cmp(&b.1.iou(&gt)).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert!(anchors[best].iou(&gt) < 0.4);
        let t = assign_rpn_targets(&anchors, &[gt], 0.4, 0.8, 256, 1).unwrap();
        assert_eq!(t.positives().collect::<Vec<_>>(), vec![best]);
        assert!(t.sampled.contains(&best));
    }

    #[test]
    fn background_only_image() {
        let anchors = generate_anchors(&AnchorSpec::default(), 2, 2).unwrap();
        let t = assign_rpn_targets(&anchors, &[], 0.4, 0.8, 256, 1).unwrap();
        assert!(t.labels.iter().all(|l| *l == AnchorLabel::Negative));
        assert!(t.deltas.iter().all(Option::is_none));
        assert_eq!(t.sampled.len(), anchors.len());
    }

    #[test]
    fn bad_thresholds() {
        assert!(assign_rpn_targets(&[], &[], 0.8, 0.4, 256, 0).is_err());
        assert!(assign_rpn_targets(&[], &[], 0.4, 1.2, 256, 0).is_err());
    }

    #[test]
    fn partition_matches_brute_force_iou_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let anchors = generate_anchors(&AnchorSpec::default(), 6, 8).unwrap();
        for trial in 0..20 {
            let gts: Vec<BBox> = (0..rng.random_range(1..4))
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..150.0));
                    let (w, h) = (rng.random_range(20.0..120.0), rng.random_range(20.0..120.0));
                    BBox::new(x, y, x + w, y + h).unwrap()
                })
                .collect();
            let t = assign_rpn_targets(&anchors, &gts, 0.4, 0.8, 256, trial).unwrap();
            // oracle: full IoU matrix
            let m: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| a.iou(g)).collect()).collect();
            let mut forced = vec![false; anchors.len()];
            for j in 0..gts.len() {
                let mut arg = 0;
                for i in 0..anchors.len() {
                    if m[i][j] > m[arg][j] {
                        arg = i;
                    }
                }
                forced[arg] = true;
            }
            for i in 0..anchors.len() {
                let mx = m[i].iter().copied().fold(0.0, f64::max);
                let expect = if mx > 0.8 || forced[i] {
                    AnchorLabel::Positive
                } else if mx < 0.4 {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignore
                };
                assert_eq!(t.labels[i], expect, "trial {trial} anchor {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn count_formula(ns in 1usize..5, nr in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let spec = AnchorSpec {
                sizes: (0..ns).map(|i| 16.0 * (i + 1) as f64).collect(),
                ratios: (0..nr).map(|i| (1.0, 0.5 + i as f64)).collect(),
                stride: 16,
            };
            prop_assert_eq!(generate_anchors(&spec, h, w).unwrap().len(), ns * nr * h * w);
        }

        #[test]
        fn sampling_caps_and_determinism(seed in any::<u64>(), n_cls in 2usize..300,
                                         gx in 0.0..150.0f64, gy in 0.0..100.0f64) {
            let anchors = generate_anchors(&AnchorSpec::default(), 5, 6).unwrap();
            let gts = [BBox::new(gx, gy, gx + 50.0, gy + 40.0).unwrap(),
                       BBox::new(gy, gx * 0.5, gy + 90.0, gx * 0.5 + 70.0).unwrap()];
            let t = assign_rpn_targets(&anchors, &gts, 0.4, 0.8, n_cls, seed).unwrap();
            prop_assert!(t.sampled.len() <= n_cls);
            prop_assert!(t.sampled_positives() <= n_cls.div_ceil(2));
            prop_assert!(t.sampled.iter().all(|&i| t.labels[i] != AnchorLabel::Ignore));
            prop_assert!(t.positives().count() >= 1);
            let again = assign_rpn_targets(&anchors, &gts, 0.4, 0.8, n_cls, seed).unwrap();
            prop_assert_eq!(t, again);
        }
    }
}

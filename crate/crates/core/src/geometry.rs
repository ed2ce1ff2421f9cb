//! Axis-aligned box arithmetic: IoU, delta encoding, clipping and greedy NMS.
//!
//! Boxes use continuous corner coordinates `(x1, y1, x2, y2)` in pixels with
//! `x2 > x1` and `y2 > y1`; area is `(x2-x1)·(y2-y1)` with no quantisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on `|dw|`, `|dh|` applied by [`decode`].
pub const DEFAULT_DELTA_CLAMP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("degenerate box {x1},{y1},{x2},{y2}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Area of the intersection, zero when interiors are disjoint.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// IoU without validation; callers guarantee both boxes are valid.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clip to `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Validating IoU.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::invalid(format!("iou of degenerate box {bx:?}")));
        }
    }
    Ok(a.iou(b))
}

/// Regression target relative to an anchor: center offsets normalised by
/// anchor size, log-space size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn encode(anchor: &BBox, target: &BBox) -> BoxDelta {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        dx: (tx - ax) / aw,
        dy: (ty - ay) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    }
}

pub fn decode(anchor: &BBox, delta: &BoxDelta) -> BBox {
    decode_clamped(anchor, delta, DEFAULT_DELTA_CLAMP)
}

/// Inverse of [`encode`] with `dw`, `dh` clamped to `±clamp`. Non-finite
/// deltas are treated as zero.
pub fn decode_clamped(anchor: &BBox, delta: &BoxDelta, clamp: f64) -> BBox {
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + finite(delta.dx) * aw;
    let cy = ay + finite(delta.dy) * ah;
    let w = aw * finite(delta.dw).clamp(-clamp, clamp).exp();
    let h = ah * finite(delta.dh).clamp(-clamp, clamp).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Order of indices by descending score, lower index first on ties.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS returning kept indices in output order. Stops after
/// `max_keep` survivors, which equals truncating the full result.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64, max_keep: Option<usize>) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let limit = max_keep.unwrap_or(usize::MAX);
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_by_score(scores) {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy non-maximum suppression. Output is sorted by descending score and
/// no two outputs overlap with IoU above `iou_threshold`.
pub fn nms(candidates: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    let (boxes, scores): (Vec<BBox>, Vec<f64>) = candidates.iter().copied().unzip();
    nms_indices(&boxes, &scores, iou_threshold, None)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

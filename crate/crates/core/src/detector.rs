//! Phase one: a two-stage region-proposal detector.
//!
//! A VGG-style backbone (3×3 conv + ReLU + 2×2 max pool blocks) maps the
//! resized image to an `[H/stride, W/stride, C]` feature map. The region
//! proposal network scores every anchor (softmax over background/object)
//! and regresses a box delta; the best proposals after NMS are ROI-pooled
//! to 7×7 and fed through two dense layers to a classification branch and a
//! class-agnostic box branch. Both stages are trained jointly by summing
//! their losses. Proposals are treated as constants during backpropagation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_roi_targets, assign_rpn_targets, generate_anchors, AnchorLabel, AnchorSpec};
use crate::dataio::{ImageRecord, RasterImage};
use crate::error::{Error, Result};
use crate::geometry::{decode, encode, nms_indices, BBox, BoxDelta};
use crate::netcore::loss::{smooth_l1, softmax, softmax_cross_entropy};
use crate::netcore::{build_optimizer, Checkpoint, Conv2d, Dense, Layer, MaxPool2d, Mode, OptimizerKind, Relu, Scalar, Sequential, Tensor};
use crate::roi::{resize_image, roi_pool, roi_pool_backward, RoiPooled, POOL_SIZE};

/// Heads start at a tenth of He scale so initial deltas stay small.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output channels of each backbone block; one block per 2× pooling.
    pub backbone_widths: Vec<usize>,
    pub rpn_channels: usize,
    pub fc_width: usize,
    pub anchors: AnchorSpec,
    pub rpn_lo: f64,
    pub rpn_hi: f64,
    pub proposal_nms_iou: f64,
    pub proposals_kept: usize,
    pub grain_threshold: f64,
    pub detection_nms_iou: f64,
    /// RPN minibatch size per image.
    pub n_cls: usize,
    /// Second-stage regions sampled per image.
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    pub lambda: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Foreground classes; the pipeline detector has one.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_width: 640,
            input_height: 480,
            backbone_widths: vec![8, 16, 32, 32, 32],
            rpn_channels: 32,
            fc_width: 64,
            anchors: AnchorSpec::default(),
            rpn_lo: 0.4,
            rpn_hi: 0.8,
            proposal_nms_iou: 0.8,
            proposals_kept: 200,
            grain_threshold: 0.6,
            detection_nms_iou: 0.5,
            n_cls: 256,
            roi_batch: 64,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            lambda: 10.0,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            epochs: 20,
            num_classes: 1,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        self.anchors.stride
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.input_height / self.stride(), self.input_width / self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.anchors.validate().map_err(|e| Error::Config(e.to_string()))?;
        let stride = self.stride();
        if !stride.is_power_of_two() || 1usize << self.backbone_widths.len() != stride {
            return bad(format!(
                "{} backbone blocks give stride {}, anchors expect {stride}",
                self.backbone_widths.len(),
                1usize << self.backbone_widths.len()
            ));
        }
        if self.input_width == 0 || self.input_height == 0 || !self.input_width.is_multiple_of(stride) || !self.input_height.is_multiple_of(stride) {
            return bad(format!(
                "input {}x{} not divisible by stride {stride}",
                self.input_width, self.input_height
            ));
        }
        if self.backbone_widths.contains(&0) || self.rpn_channels == 0 || self.fc_width == 0 {
            return bad("layer widths must be positive".into());
        }
        for (name, v) in [
            ("rpn_lo", self.rpn_lo),
            ("rpn_hi", self.rpn_hi),
            ("proposal_nms_iou", self.proposal_nms_iou),
            ("grain_threshold", self.grain_threshold),
            ("detection_nms_iou", self.detection_nms_iou),
            ("roi_fg_fraction", self.roi_fg_fraction),
            ("roi_fg_iou", self.roi_fg_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        if self.rpn_lo >= self.rpn_hi {
            return bad("rpn_lo must be below rpn_hi".into());
        }
        if self.proposals_kept == 0 || self.n_cls == 0 || self.roi_batch == 0 || self.num_classes == 0 {
            return bad("proposals_kept, n_cls, roi_batch and num_classes must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lr > 0.0) {
            return bad("lambda must be non-negative and lr positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    /// Foreground class index; always 0 for the single-class detector.
    pub class: usize,
}

/// Decode, clip, NMS, keep the best `keep` in descending objectness.
pub fn select_proposals(
    anchors: &[BBox],
    objectness: &[f64],
    deltas: &[BoxDelta],
    image_w: f64,
    image_h: f64,
    nms_iou: f64,
    keep: usize,
) -> Vec<Proposal> {
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for ((a, d), &s) in anchors.iter().zip(deltas).zip(objectness) {
        if let Some(b) = decode(a, d).clip(image_w, image_h) {
            boxes.push(b);
            scores.push(s);
        }
    }
    nms_indices(&boxes, &scores, nms_iou, Some(keep))
        .into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

/// Training targets of one stage. Entry `k` supervises prediction row
/// `indices[k]` with class `classes[k]` (0 is background) and, for
/// foreground rows, the regression target `deltas[k]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTargets {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub deltas: Vec<Option<BoxDelta>>,
}

impl StageTargets {
    pub fn positives(&self) -> usize {
        self.deltas.iter().filter(|d| d.is_some()).count()
    }
}

#[derive(Clone, Debug)]
pub struct StageLoss<T> {
    pub cls: f64,
    /// Already multiplied by λ.
    pub reg: f64,
    pub grad_logits: Vec<T>,
    pub grad_deltas: Vec<T>,
}

/// `(1/N_cls)·Σ CE + λ·(1/N_reg)·Σ smoothL1` over the sampled rows, where
/// `N_cls` is the number of sampled rows and `N_reg` the number of sampled
/// foreground rows. Either term is zero when its normaliser is zero.
pub fn stage_loss<T: Scalar>(
    logits: &[T],
    n_classes: usize,
    deltas: &[T],
    targets: &StageTargets,
    lambda: f64,
) -> Result<StageLoss<T>> {
    let rows = logits.len() / n_classes.max(1);
    if logits.len() != rows * n_classes || deltas.len() != rows * 4 {
        return Err(Error::ShapeMismatch {
            op: "stage_loss",
            lhs: vec![logits.len(), n_classes],
            rhs: vec![deltas.len(), 4],
        });
    }
    let n = targets.indices.len();
    if targets.classes.len() != n || targets.deltas.len() != n {
        return Err(Error::invalid("stage targets have inconsistent lengths"));
    }
    let mut out = StageLoss {
        cls: 0.0,
        reg: 0.0,
        grad_logits: vec![T::zero(); logits.len()],
        grad_deltas: vec![T::zero(); deltas.len()],
    };
    if n == 0 {
        return Ok(out);
    }
    let n_reg = targets.positives();
    let cls_w = 1.0 / n as f64;
    let reg_w = if n_reg > 0 { lambda / n_reg as f64 } else { 0.0 };
    for k in 0..n {
        let row = targets.indices[k];
        if row >= rows {
            return Err(Error::invalid(format!("target row {row} out of {rows}")));
        }
        let (fg, target) = (targets.classes[k] > 0, targets.deltas[k]);
        if fg != target.is_some() {
            return Err(Error::invalid("regression targets must be given exactly for foreground rows"));
        }
        let lr = row * n_classes..(row + 1) * n_classes;
        let (ce, g) = softmax_cross_entropy(&logits[lr.clone()], targets.classes[k])?;
        out.cls += cls_w * ce.f64();
        for (dst, gv) in out.grad_logits[lr].iter_mut().zip(g) {
            *dst = *dst + T::of(cls_w) * gv;
        }
        if let Some(t) = target {
            let tgt: Vec<T> = t.to_array().iter().map(|&v| T::of(v)).collect();
            let dr = row * 4..row * 4 + 4;
            let (l, g) = smooth_l1(&deltas[dr.clone()], &tgt)?;
            out.reg += reg_w * l.f64();
            for (dst, gv) in out.grad_deltas[dr].iter_mut().zip(g) {
                *dst = *dst + T::of(reg_w) * gv;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub rcnn_cls: f64,
    pub rcnn_reg: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.rcnn_cls + self.rcnn_reg
    }

    fn add(&mut self, o: &LossComponents) {
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.rcnn_cls += o.rcnn_cls;
        self.rcnn_reg += o.rcnn_reg;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            rpn_cls: self.rpn_cls * s,
            rpn_reg: self.rpn_reg * s,
            rcnn_cls: self.rcnn_cls * s,
            rcnn_reg: self.rcnn_reg * s,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrcnnLoss<T> {
    pub components: LossComponents,
    pub rpn: StageLoss<T>,
    pub rcnn: StageLoss<T>,
}

/// Joint loss: RPN stage over anchors (2-way) plus RCNN stage over the
/// sampled regions (`rcnn_classes`-way), summed.
#[allow(clippy::too_many_arguments)]
pub fn frcnn_loss<T: Scalar>(
    rpn_logits: &[T],
    rpn_deltas: &[T],
    rpn_targets: &StageTargets,
    rcnn_logits: &[T],
    rcnn_deltas: &[T],
    rcnn_targets: &StageTargets,
    rcnn_classes: usize,
    lambda: f64,
) -> Result<FrcnnLoss<T>> {
    let rpn = stage_loss(rpn_logits, 2, rpn_deltas, rpn_targets, lambda)?;
    let rcnn = stage_loss(rcnn_logits, rcnn_classes, rcnn_deltas, rcnn_targets, lambda)?;
    Ok(FrcnnLoss {
        components: LossComponents {
            rpn_cls: rpn.cls,
            rpn_reg: rpn.reg,
            rcnn_cls: rcnn.cls,
            rcnn_reg: rcnn.reg,
        },
        rpn,
        rcnn,
    })
}

/// Everything one image contributes to a training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTargets {
    pub rpn: StageTargets,
    /// Regions fed to the second stage, input-image coordinates.
    pub rois: Vec<BBox>,
    pub rcnn: StageTargets,
}

/// Per-anchor RPN output.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput {
    /// Softmax over `[background, object]`.
    pub scores: Vec<[f64; 2]>,
    pub deltas: Vec<BoxDelta>,
}

impl RpnOutput {
    pub fn objectness(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s[1]).collect()
    }
}

fn rpn_output<T: Scalar>(logits: &Tensor<T>, deltas: &Tensor<T>) -> RpnOutput {
    RpnOutput {
        scores: logits
            .data()
            .chunks_exact(2)
            .map(|pair| {
                let p = softmax(pair);
                [p[0].f64(), p[1].f64()]
            })
            .collect(),
        deltas: deltas
            .data()
            .chunks_exact(4)
            .map(|d| BoxDelta::from_slice(&d.iter().map(|v| v.f64()).collect::<Vec<_>>()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seed: u64,
    pub images: usize,
    #[serde(flatten)]
    pub loss: LossComponents,
    pub total: f64,
}

pub struct Detector<T: Scalar> {
    config: DetectorConfig,
    anchors: Vec<BBox>,
    backbone: Sequential<T>,
    rpn_conv: Conv2d<T>,
    rpn_relu: Relu<T>,
    rpn_cls: Conv2d<T>,
    rpn_reg: Conv2d<T>,
    rcnn_fc: Sequential<T>,
    rcnn_cls: Dense<T>,
    rcnn_reg: Dense<T>,
    pooled: Vec<RoiPooled<T>>,
}

struct RpnForward<T> {
    feature: Tensor<T>,
    logits: Tensor<T>,
    deltas: Tensor<T>,
}

fn scaled_conv<T: Scalar, R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Conv2d<T> {
    let mut c = Conv2d::new(in_c, out_c, 1, 1, 0, rng);
    c.weight = c.weight.map(|w| w * T::of(HEAD_INIT_SCALE));
    c
}

fn scaled_dense<T: Scalar, R: Rng>(in_f: usize, out_f: usize, rng: &mut R) -> Dense<T> {
    let mut d = Dense::new(in_f, out_f, rng);
    d.weight = d.weight.map(|w| w * T::of(HEAD_INIT_SCALE));
    d
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut backbone = Sequential::new();
        let mut c_in = 3;
        for &c in &config.backbone_widths {
            backbone.push(Conv2d::new(c_in, c, 3, 1, 1, &mut rng));
            backbone.push(Relu::new());
            backbone.push(MaxPool2d::new(2, 2));
            c_in = c;
        }
        let a = config.anchors.per_cell();
        let rpn_conv = Conv2d::new(c_in, config.rpn_channels, 3, 1, 1, &mut rng);
        let rpn_cls = scaled_conv(config.rpn_channels, 2 * a, &mut rng);
        let rpn_reg = scaled_conv(config.rpn_channels, 4 * a, &mut rng);
        let pooled_len = POOL_SIZE * POOL_SIZE * c_in;
        let mut rcnn_fc = Sequential::new();
        rcnn_fc.push(Dense::new(pooled_len, config.fc_width, &mut rng));
        rcnn_fc.push(Relu::new());
        rcnn_fc.push(Dense::new(config.fc_width, config.fc_width, &mut rng));
        rcnn_fc.push(Relu::new());
        let rcnn_cls = scaled_dense(config.fc_width, config.num_classes + 1, &mut rng);
        let rcnn_reg = scaled_dense(config.fc_width, 4, &mut rng);
        let (fh, fw) = config.feature_dims();
        Ok(Self {
            anchors: generate_anchors(&config.anchors, fh, fw)?,
            config: config.clone(),
            backbone,
            rpn_conv,
            rpn_relu: Relu::new(),
            rpn_cls,
            rpn_reg,
            rcnn_fc,
            rcnn_cls,
            rcnn_reg,
            pooled: Vec::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut p = self.backbone.named_params_mut("backbone");
        for (prefix, layer) in [
            ("rpn.conv", &mut self.rpn_conv as &mut dyn Layer<T>),
            ("rpn.cls", &mut self.rpn_cls),
            ("rpn.reg", &mut self.rpn_reg),
        ] {
            p.extend(layer.params_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        p.extend(self.rcnn_fc.named_params_mut("rcnn.fc"));
        for (prefix, layer) in [("rcnn.cls", &mut self.rcnn_cls), ("rcnn.reg", &mut self.rcnn_reg)] {
            p.extend(layer.params_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::from_params(self.named_params_mut())
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(self.named_params_mut())
    }

    pub fn from_checkpoint(config: &DetectorConfig, ck: &Checkpoint) -> Result<Self> {
        let mut d = Self::new(config)?;
        d.load_checkpoint(ck)?;
        Ok(d)
    }

    pub fn load(config: &DetectorConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &Checkpoint::load(path)?)
    }

    /// Resizes to the configured input and centres pixel values on zero.
    pub fn prepare_input(&self, image: &RasterImage) -> Result<Tensor<T>> {
        let r = resize_image(image, self.config.input_width, self.config.input_height)?;
        Ok(r.to_tensor::<T>().map(|v| v - T::of(0.5)))
    }

    pub fn backbone_forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.backbone.forward(input, mode)
    }

    fn forward_rpn(&mut self, input: &Tensor<T>, mode: Mode) -> Result<RpnForward<T>> {
        let (h, w, _) = input.hwc("detector input")?;
        if (h, w) != (self.config.input_height, self.config.input_width) {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                lhs: input.shape().to_vec(),
                rhs: vec![self.config.input_height, self.config.input_width, 3],
            });
        }
        let feature = self.backbone.forward(input, mode)?;
        let hidden = self.rpn_conv.forward(&feature, mode)?;
        let hidden = self.rpn_relu.forward(&hidden, mode)?;
        let logits = self.rpn_cls.forward(&hidden, mode)?;
        let deltas = self.rpn_reg.forward(&hidden, mode)?;
        Ok(RpnForward { feature, logits, deltas })
    }

    pub fn rpn_forward(&mut self, input: &Tensor<T>) -> Result<RpnOutput> {
        let f = self.forward_rpn(input, Mode::Eval)?;
        Ok(rpn_output(&f.logits, &f.deltas))
    }

    fn proposals_from(&self, f: &RpnForward<T>) -> Vec<Proposal> {
        let out = rpn_output(&f.logits, &f.deltas);
        select_proposals(
            &self.anchors,
            &out.objectness(),
            &out.deltas,
            self.config.input_width as f64,
            self.config.input_height as f64,
            self.config.proposal_nms_iou,
            self.config.proposals_kept,
        )
    }

    pub fn proposals(&mut self, input: &Tensor<T>) -> Result<Vec<Proposal>> {
        let f = self.forward_rpn(input, Mode::Eval)?;
        Ok(self.proposals_from(&f))
    }

    /// Second-stage logits `[R, classes + 1]` and deltas `[R, 4]`.
    fn forward_rcnn(&mut self, feature: &Tensor<T>, rois: &[BBox], mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let inv = 1.0 / self.config.stride() as f64;
        let c = feature.hwc("rcnn feature")?.2;
        let cell = POOL_SIZE * POOL_SIZE * c;
        let mut stacked = Vec::with_capacity(rois.len() * cell);
        self.pooled.clear();
        for roi in rois {
            let p = roi_pool(feature, &roi.scale(inv, inv), POOL_SIZE, POOL_SIZE)?;
            stacked.extend_from_slice(p.output.data());
            if mode == Mode::Train {
                self.pooled.push(p);
            }
        }
        let x = Tensor::from_vec(&[rois.len(), cell], stacked)?;
        let h = self.rcnn_fc.forward(&x, mode)?;
        Ok((self.rcnn_cls.forward(&h, mode)?, self.rcnn_reg.forward(&h, mode)?))
    }

    /// RCNN probabilities and deltas for given regions (input coordinates).
    pub fn rcnn_forward(&mut self, input: &Tensor<T>, rois: &[BBox]) -> Result<Vec<(Vec<f64>, BoxDelta)>> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.forward_rpn(input, Mode::Eval)?;
        let (logits, deltas) = self.forward_rcnn(&f.feature, rois, Mode::Eval)?;
        let k = self.config.num_classes + 1;
        Ok(logits
            .data()
            .chunks_exact(k)
            .zip(deltas.data().chunks_exact(4))
            .map(|(l, d)| {
                let p = softmax(l).into_iter().map(|v| v.f64()).collect();
                (p, BoxDelta::from_slice(&d.iter().map(|v| v.f64()).collect::<Vec<_>>()))
            })
            .collect())
    }

    /// Builds targets for one image from its proposals; `gts` are input
    /// coordinates with foreground class indices.
    pub fn build_targets(&self, proposals: &[Proposal], gts: &[(BBox, usize)], seed: u64) -> Result<ImageTargets> {
        let boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
        let rt = assign_rpn_targets(&self.anchors, &boxes, self.config.rpn_lo, self.config.rpn_hi, self.config.n_cls, seed)?;
        let rpn = StageTargets {
            classes: rt.sampled.iter().map(|&i| usize::from(rt.labels[i] == AnchorLabel::Positive)).collect(),
            deltas: rt
                .sampled
                .iter()
                .map(|&i| if rt.labels[i] == AnchorLabel::Positive { rt.deltas[i] } else { None })
                .collect(),
            indices: rt.sampled,
        };

        let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        candidates.extend_from_slice(&boxes);
        let max_pos = ((self.config.roi_batch as f64 * self.config.roi_fg_fraction).round() as usize).max(1);
        let st = assign_roi_targets(&candidates, &boxes, self.config.roi_fg_iou, self.config.roi_batch, max_pos, seed ^ 0x5eed);
        let mut t = ImageTargets {
            rpn,
            ..Default::default()
        };
        for (k, &i) in st.sampled.iter().enumerate() {
            t.rois.push(candidates[i]);
            t.rcnn.indices.push(k);
            match st.matched_gt[i] {
                Some(j) if st.labels[i] == AnchorLabel::Positive => {
                    t.rcnn.classes.push(gts[j].1 + 1);
                    t.rcnn.deltas.push(Some(encode(&candidates[i], &boxes[j])));
                }
                _ => {
                    t.rcnn.classes.push(0);
                    t.rcnn.deltas.push(None);
                }
            }
        }
        Ok(t)
    }

    fn loss_from(&mut self, f: &RpnForward<T>, targets: &ImageTargets, backward: bool) -> Result<LossComponents> {
        let k = self.config.num_classes + 1;
        let (rcnn_logits, rcnn_deltas) = if targets.rois.is_empty() {
            (Tensor::zeros(&[0, k]), Tensor::zeros(&[0, 4]))
        } else {
            self.forward_rcnn(&f.feature, &targets.rois, Mode::Train)?
        };
        let loss = frcnn_loss(
            f.logits.data(),
            f.deltas.data(),
            &targets.rpn,
            rcnn_logits.data(),
            rcnn_deltas.data(),
            &targets.rcnn,
            k,
            self.config.lambda,
        )?;
        if backward {
            let mut grad_feature = vec![T::zero(); f.feature.len()];
            if !targets.rois.is_empty() {
                let g_cls = Tensor::from_vec(rcnn_logits.shape(), loss.rcnn.grad_logits.clone())?;
                let g_reg = Tensor::from_vec(rcnn_deltas.shape(), loss.rcnn.grad_deltas.clone())?;
                let mut dh = self.rcnn_cls.backward(&g_cls)?;
                let dh2 = self.rcnn_reg.backward(&g_reg)?;
                dh.data_mut().iter_mut().zip(dh2.data()).for_each(|(a, &b)| *a = *a + b);
                let dpool = self.rcnn_fc.backward(&dh)?;
                let cell = dpool.len() / targets.rois.len();
                for (r, pooled) in self.pooled.iter().enumerate() {
                    let g = Tensor::from_vec(pooled.output.shape(), dpool.data()[r * cell..(r + 1) * cell].to_vec())?;
                    roi_pool_backward(pooled, &g, &mut grad_feature)?;
                }
            }
            let g_logits = Tensor::from_vec(f.logits.shape(), loss.rpn.grad_logits.clone())?;
            let g_deltas = Tensor::from_vec(f.deltas.shape(), loss.rpn.grad_deltas.clone())?;
            let mut dh = self.rpn_cls.backward(&g_logits)?;
            let dh2 = self.rpn_reg.backward(&g_deltas)?;
            dh.data_mut().iter_mut().zip(dh2.data()).for_each(|(a, &b)| *a = *a + b);
            let dh = self.rpn_relu.backward(&dh)?;
            let df = self.rpn_conv.backward(&dh)?;
            grad_feature.iter_mut().zip(df.data()).for_each(|(a, &b)| *a = *a + b);
            self.backbone.backward(&Tensor::from_vec(f.feature.shape(), grad_feature)?)?;
        }
        Ok(loss.components)
    }

    /// Loss for fixed targets; with `backward`, gradients are accumulated
    /// into the parameters.
    pub fn loss_with_targets(&mut self, input: &Tensor<T>, targets: &ImageTargets, backward: bool) -> Result<LossComponents> {
        let f = self.forward_rpn(input, Mode::Train)?;
        self.loss_from(&f, targets, backward)
    }

    /// Forward, target assignment from the current proposals, loss and
    /// backward for one image. Returns the loss before the update.
    pub fn accumulate_step(&mut self, input: &Tensor<T>, gts: &[(BBox, usize)], seed: u64) -> Result<LossComponents> {
        let f = self.forward_rpn(input, Mode::Train)?;
        let proposals = self.proposals_from(&f);
        let targets = self.build_targets(&proposals, gts, seed)?;
        self.loss_from(&f, &targets, true)
    }

    /// Detections in input-tensor coordinates.
    pub fn detect_tensor(&mut self, input: &Tensor<T>) -> Result<Vec<Detection>> {
        let f = self.forward_rpn(input, Mode::Eval)?;
        let proposals = self.proposals_from(&f);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let (logits, deltas) = self.forward_rcnn(&f.feature, &rois, Mode::Eval)?;
        let k = self.config.num_classes + 1;
        let (w, h) = (self.config.input_width as f64, self.config.input_height as f64);
        let mut candidates = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            let p = softmax(&logits.data()[r * k..(r + 1) * k]);
            let (class, conf) = (1..k).fold((0, f64::NEG_INFINITY), |acc, c| {
                if p[c].f64() > acc.1 {
                    (c - 1, p[c].f64())
                } else {
                    acc
                }
            });
            if conf <= self.config.grain_threshold {
                continue;
            }
            let d: Vec<f64> = deltas.data()[r * 4..r * 4 + 4].iter().map(|v| v.f64()).collect();
            if let Some(b) = decode(roi, &BoxDelta::from_slice(&d)).clip(w, h) {
                candidates.push(Detection {
                    bbox: b,
                    confidence: conf,
                    class,
                });
            }
        }
        let boxes: Vec<BBox> = candidates.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = candidates.iter().map(|d| d.confidence).collect();
        Ok(nms_indices(&boxes, &scores, self.config.detection_nms_iou, None)
            .into_iter()
            .map(|i| candidates[i])
            .collect())
    }

    /// Detections in original image coordinates, descending confidence.
    pub fn detect(&mut self, image: &RasterImage) -> Result<Vec<Detection>> {
        let x = self.prepare_input(image)?;
        let (sx, sy) = self.scale_to_image(image);
        let (w, h) = (image.width() as f64, image.height() as f64);
        Ok(self
            .detect_tensor(&x)?
            .into_iter()
            .filter_map(|d| {
                d.bbox.scale(sx, sy).clip(w, h).map(|bbox| Detection { bbox, ..d })
            })
            .collect())
    }

    fn scale_to_image(&self, image: &RasterImage) -> (f64, f64) {
        (
            image.width() as f64 / self.config.input_width as f64,
            image.height() as f64 / self.config.input_height as f64,
        )
    }

    /// Ground truths of `record` mapped into input coordinates.
    pub fn scaled_targets(&self, record: &ImageRecord) -> Vec<(BBox, usize)> {
        let sx = self.config.input_width as f64 / record.width as f64;
        let sy = self.config.input_height as f64 / record.height as f64;
        record
            .annotations
            .iter()
            .map(|a| {
                let class = if self.config.num_classes > 1 { a.class.index() } else { 0 };
                (a.bbox.scale(sx, sy), class)
            })
            .collect()
    }
}

fn step_seed(seed: u64, epoch: usize, image: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ image as u64
}

pub struct TrainedDetector {
    pub detector: Detector<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains with batch size one, visiting images in a seeded order each epoch.
pub fn train_detector(config: &DetectorConfig, images: &[RasterImage], records: &[ImageRecord]) -> Result<TrainedDetector> {
    if images.len() != records.len() {
        return Err(Error::invalid(format!("{} images for {} records", images.len(), records.len())));
    }
    let mut det = Detector::<f32>::new(config)?;
    let inputs = images.iter().map(|im| det.prepare_input(im)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<(BBox, usize)>> = records.iter().map(|r| det.scaled_targets(r)).collect();
    let mut opt = build_optimizer::<f32>(config.optimizer, config.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        for &i in &order {
            let l = det.accumulate_step(&inputs[i], &gts[i], step_seed(config.seed, epoch, i))?;
            sum.add(&l);
            let mut params: Vec<&mut Tensor<f32>> = det.named_params_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut params)?;
            params.iter_mut().for_each(|t| t.zero_grad());
        }
        let loss = sum.scaled(1.0 / images.len().max(1) as f64);
        log.push(EpochLog {
            epoch,
            seed: config.seed,
            images: images.len(),
            total: loss.total(),
            loss,
        });
    }
    Ok(TrainedDetector { detector: det, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::gradcheck::{numeric_gradient, relative_error};
    use crate::synth::{generate_dataset, SceneSpec};

    pub(crate) fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            input_width: 8,
            input_height: 8,
            backbone_widths: vec![3, 4],
            rpn_channels: 3,
            fc_width: 5,
            anchors: AnchorSpec {
                sizes: vec![3.0, 6.0],
                ratios: vec![(1.0, 1.0), (0.7, 1.4)],
                stride: 4,
            },
            n_cls: 8,
            roi_batch: 6,
            roi_fg_fraction: 0.5,
            proposals_kept: 5,
            seed: 3,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn backbone_shapes() {
        for (w, h, fw, fh) in [(640, 480, 20, 15), (64, 64, 2, 2)] {
            let cfg = DetectorConfig {
                input_width: w,
                input_height: h,
                ..DetectorConfig::default()
            };
            let mut d = Detector::<f32>::new(&cfg).unwrap();
            let f = d.backbone_forward(&Tensor::zeros(&[h, w, 3]), Mode::Eval).unwrap();
            assert_eq!(f.shape(), &[fh, fw, 32]);
            // zero input, zero biases: ReLU(0) stays 0 through every block
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let ok = DetectorConfig::default();
        ok.validate().unwrap();
        for bad in [
            DetectorConfig { input_width: 650, ..ok.clone() },
            DetectorConfig { backbone_widths: vec![8, 8], ..ok.clone() },
            DetectorConfig { grain_threshold: 1.0, ..ok.clone() },
            DetectorConfig { proposals_kept: 0, ..ok.clone() },
            DetectorConfig { rpn_lo: 0.9, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn rpn_scores_are_distributions() {
        let cfg = DetectorConfig {
            input_width: 128,
            input_height: 96,
            ..DetectorConfig::default()
        };
        let mut d = Detector::<f32>::new(&cfg).unwrap();
        let img = generate_dataset(&SceneSpec { width: 128, height: 96, ..SceneSpec::default() }, 1).unwrap();
        let x = d.prepare_input(&img.images[0]).unwrap();
        let out = d.rpn_forward(&x).unwrap();
        assert_eq!(out.scores.len(), 4 * 3 * 16);
        assert_eq!(out.deltas.len(), 4 * 3 * 16);
        for s in &out.scores {
            assert!((s[0] + s[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_regression_weights_give_anchor_proposals() {
        let cfg = DetectorConfig {
            input_width: 128,
            input_height: 96,
            proposals_kept: 1000,
            proposal_nms_iou: 0.999,
            ..DetectorConfig::default()
        };
        let mut d = Detector::<f64>::new(&cfg).unwrap();
        for (name, t) in d.named_params_mut() {
            if name.starts_with("rpn.reg") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::full(&[96, 128, 3], 0.1);
        let out = d.rpn_forward(&x).unwrap();
        assert!(out.deltas.iter().all(|dl| dl.to_array() == [0.0; 4]));
        let clipped: Vec<BBox> = d.anchors().iter().filter_map(|a| a.clip(128.0, 96.0)).collect();
        for p in d.proposals(&x).unwrap() {
            let near = |a: &BBox| <[f64; 4]>::from(*a).iter().zip(<[f64; 4]>::from(p.bbox)).all(|(x, y)| (x - y).abs() < 1e-9);
            assert!(clipped.iter().any(near));
        }
    }

    #[test]
    fn duplicate_anchors_collapse() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let d = BoxDelta { dx: 0.1, dy: 0.0, dw: 0.0, dh: 0.0 };
        let p = select_proposals(&[a, a, a], &[0.3, 0.9, 0.5], &[d, d, d], 100.0, 100.0, 0.8, 200);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].objectness, 0.9);
    }

    #[test]
    fn loss_edge_cases() {
        // uniform scores, no positives: ln 2 exactly, no regression term
        let n = 10;
        let t = StageTargets {
            indices: (0..n).collect(),
            classes: vec![0; n],
            deltas: vec![None; n],
        };
        let l = stage_loss(&vec![0.0f64; 2 * n], 2, &vec![0.3; 4 * n], &t, 10.0).unwrap();
        assert!((l.cls - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.reg, 0.0);
        // confident and exact
        let t = StageTargets {
            indices: vec![0, 1],
            classes: vec![1, 0],
            deltas: vec![Some(BoxDelta { dx: 0.1, dy: -0.2, dw: 0.3, dh: 0.0 }), None],
        };
        let logits = [-30.0, 30.0, 30.0, -30.0];
        let deltas = [0.1, -0.2, 0.3, 0.0, 5.0, 5.0, 5.0, 5.0];
        let l = stage_loss(&logits, 2, &deltas, &t, 10.0).unwrap();
        assert!(l.cls + l.reg < 1e-8);
    }

    #[test]
    fn inconsistent_targets_rejected() {
        let t = StageTargets {
            indices: vec![0],
            classes: vec![1],
            deltas: vec![None],
        };
        assert!(stage_loss(&[0.0f64, 0.0], 2, &[0.0; 4], &t, 1.0).is_err());
    }

    #[test]
    fn tiny_detector_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut det = Detector::<f64>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[8, 8, 3], (0..192).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let gts = vec![(BBox::new(1.0, 1.0, 5.0, 6.0).unwrap(), 0), (BBox::new(4.5, 3.0, 7.5, 7.5).unwrap(), 0)];
        let proposals = vec![
            Proposal { bbox: BBox::new(0.5, 0.5, 5.5, 5.0).unwrap(), objectness: 0.9 },
            Proposal { bbox: BBox::new(2.0, 2.0, 8.0, 8.0).unwrap(), objectness: 0.7 },
            Proposal { bbox: BBox::new(0.0, 4.0, 3.0, 8.0).unwrap(), objectness: 0.4 },
        ];
        let targets = det.build_targets(&proposals, &gts, 9).unwrap();
        assert!(targets.rpn.positives() > 0 && targets.rcnn.positives() > 0);

        det.zero_grad();
        det.loss_with_targets(&x, &targets, true).unwrap();
        let mut analytic = Vec::new();
        let mut flat = Vec::new();
        for (_, t) in det.named_params_mut() {
            analytic.extend_from_slice(t.grad().unwrap());
            flat.extend_from_slice(t.data());
        }
        let numeric = numeric_gradient(
            |theta| {
                let mut off = 0;
                for (_, t) in det.named_params_mut() {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&theta[off..off + n]);
                    off += n;
                }
                det.loss_with_targets(&x, &targets, false).unwrap().total()
            },
            &flat,
            1e-6,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let cfg = tiny_config();
        let mut a = Detector::<f32>::new(&cfg).unwrap();
        let ck = a.checkpoint();
        let mut b = Detector::<f32>::from_checkpoint(&DetectorConfig { seed: 99, ..cfg.clone() }, &ck).unwrap();
        assert_eq!(b.checkpoint(), ck);
        let wider = DetectorConfig { fc_width: 6, ..cfg };
        let err = match Detector::<f32>::from_checkpoint(&wider, &ck) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("mismatched checkpoint accepted"),
        };
        assert!(err.contains("rcnn.fc.0.weight"), "{err}");
    }

    #[test]
    fn untrained_detection_is_deterministic() {
        let cfg = DetectorConfig {
            input_width: 64,
            input_height: 64,
            ..DetectorConfig::default()
        };
        let data = generate_dataset(&SceneSpec { width: 64, height: 64, ..SceneSpec::default() }, 2).unwrap();
        let mut d = Detector::<f32>::new(&cfg).unwrap();
        for img in &data.images {
            let a = d.detect(img).unwrap();
            assert_eq!(a, d.detect(img).unwrap());
            for w in a.windows(2) {
                assert!(w[0].confidence >= w[1].confidence);
            }
        }
    }
}

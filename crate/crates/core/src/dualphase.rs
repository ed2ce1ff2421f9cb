//! Pipeline orchestration: secondary-dataset derivation from phase-one
//! detections and end-to-end inference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Prediction};
use crate::dataio::{write_atomic, Annotation, ClassLabel, CropManifest, CropRecord, ImageRecord, RasterImage, CROPS_DIR};
use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::roi::crop_resize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerivationRule {
    pub max_crops: usize,
    pub second_box_confidence: f64,
    pub second_box_gt_iou: f64,
    pub crop_width: usize,
    pub crop_height: usize,
}

impl Default for DerivationRule {
    fn default() -> Self {
        Self {
            max_crops: 2,
            second_box_confidence: 0.90,
            second_box_gt_iou: 0.5,
            crop_width: 300,
            crop_height: 250,
        }
    }
}

impl DerivationRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_crops == 0 {
            return Err(Error::Config("max_crops must be at least 1".into()));
        }
        for (name, v) in [
            ("second_box_confidence", self.second_box_confidence),
            ("second_box_gt_iou", self.second_box_gt_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if self.crop_width == 0 || self.crop_height == 0 {
            return Err(Error::Config("crop dims must be positive".into()));
        }
        Ok(())
    }
}

/// Picks crop regions from detections sorted by descending confidence.
///
/// The first crop is the top detection. Each further crop, up to
/// `max_crops`, is the next detection whose confidence reaches
/// `second_box_confidence` and, when ground truth is supplied, whose IoU
/// with some ground-truth box reaches `second_box_gt_iou`.
pub fn select_crops(detections: &[Detection], gts: Option<&[BBox]>, rule: &DerivationRule) -> Vec<Detection> {
    let Some((first, rest)) = detections.split_first() else {
        return Vec::new();
    };
    let mut out = vec![*first];
    for d in rest {
        if out.len() >= rule.max_crops {
            break;
        }
        let overlaps = gts.is_none_or(|g| g.iter().any(|b| b.iou(&d.bbox) >= rule.second_box_gt_iou));
        if d.confidence >= rule.second_box_confidence && overlaps {
            out.push(*d);
        }
    }
    out
}

/// Class of the ground-truth box overlapping `bbox` most; ties go to the
/// earlier annotation.
pub fn label_by_max_iou(bbox: &BBox, annotations: &[Annotation]) -> Option<(ClassLabel, f64)> {
    let mut best: Option<(ClassLabel, f64)> = None;
    for a in annotations {
        let v = a.bbox.iou(bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a.class, v));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivedCrop {
    pub image: RasterImage,
    pub record: CropRecord,
    /// Position of the source image in the input order.
    pub source_index: usize,
    pub gt_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SecondaryDataset {
    pub crops: Vec<DerivedCrop>,
    pub per_class: BTreeMap<String, usize>,
    pub source_images: usize,
    /// Images for which the detector returned nothing.
    pub without_detection: Vec<String>,
}

impl SecondaryDataset {
    pub fn manifest(&self, root: &Path) -> CropManifest {
        CropManifest {
            records: self.crops.iter().map(|c| c.record.clone()).collect(),
            root: root.to_path_buf(),
        }
    }

    /// Writes every crop under `root` and the manifest at `manifest_path`.
    pub fn write(&self, root: &Path, manifest_path: &Path) -> Result<()> {
        for c in &self.crops {
            write_atomic(&root.join(&c.record.crop_path), &c.image.encode_ppm())?;
        }
        self.manifest(root).save(manifest_path)
    }

    /// Crops per source image, `source_images` entries.
    pub fn crops_per_image(&self) -> Vec<usize> {
        let mut counts = vec![0; self.source_images];
        for c in &self.crops {
            counts[c.source_index] += 1;
        }
        counts
    }
}

fn crop_name(image_path: &str, k: usize) -> String {
    let stem = Path::new(image_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    format!("{CROPS_DIR}/{stem}_crop{k}.ppm")
}

/// Runs the detector over annotated images and builds the crop dataset.
/// Output order follows input order.
pub fn derive_secondary(
    detector: &mut Detector<f32>,
    images: &[RasterImage],
    records: &[ImageRecord],
    rule: &DerivationRule,
) -> Result<SecondaryDataset> {
    rule.validate()?;
    if images.len() != records.len() {
        return Err(Error::invalid(format!("{} images for {} records", images.len(), records.len())));
    }
    if let Some(r) = records.iter().find(|r| r.annotations.is_empty()) {
        return Err(Error::invalid(format!("image {} has no ground truth boxes", r.image)));
    }
    let mut out = SecondaryDataset {
        source_images: images.len(),
        ..Default::default()
    };
    for (idx, (img, rec)) in images.iter().zip(records).enumerate() {
        let dets = detector.detect(img)?;
        if dets.is_empty() {
            eprintln!("warning: no detection in {}, no crop derived", rec.image);
            out.without_detection.push(rec.image.clone());
            continue;
        }
        let gts = rec.boxes();
        for (k, d) in select_crops(&dets, Some(&gts), rule).into_iter().enumerate() {
            let (label, gt_iou) = label_by_max_iou(&d.bbox, &rec.annotations).expect("annotations are non-empty");
            *out.per_class.entry(label.name().to_string()).or_default() += 1;
            out.crops.push(DerivedCrop {
                image: crop_resize(img, &d.bbox, rule.crop_width, rule.crop_height)?,
                record: CropRecord {
                    crop_path: crop_name(&rec.image, k),
                    source_image: rec.image.clone(),
                    source_box: d.bbox,
                    class_label: label,
                    confidence: d.confidence.clamp(0.0, 1.0),
                },
                source_index: idx,
                gt_iou,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub bbox: BBox,
    pub label: ClassLabel,
    pub detection_confidence: f64,
    pub prediction: Prediction,
}

/// Image to detections to rule-filtered crops to class labels. Without
/// ground truth the second-crop test uses confidence alone.
pub fn infer_pipeline(
    image: &RasterImage,
    detector: &mut Detector<f32>,
    classifier: &mut Classifier<f32>,
    rule: &DerivationRule,
) -> Result<Vec<PipelineResult>> {
    let dets = detector.detect(image)?;
    select_crops(&dets, None, rule)
        .into_iter()
        .map(|d| {
            let crop = crop_resize(image, &d.bbox, rule.crop_width, rule.crop_height)?;
            let prediction = classifier.classify(&crop)?;
            Ok(PipelineResult {
                bbox: d.bbox,
                label: prediction.label(),
                detection_confidence: d.confidence,
                prediction,
            })
        })
        .collect()
}

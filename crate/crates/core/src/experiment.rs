//! Experiment runners shared by the command line and the acceptance tests.
//! Every runner is deterministic given its config; reports carry no
//! timestamps.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, Classifier, ClassifierConfig};
use crate::config::PipelineConfig;
use crate::dataio::{ClassLabel, CropManifest, DatasetManifest, ImageRecord, RasterImage};
use crate::detector::{train_detector, Detector};
use crate::dualphase::{derive_secondary, SecondaryDataset};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, cross_validate, evaluate_class, make_folds, mean_average_precision, ClassDetectionEval, ConfusionMatrix, EvalReport,
    FoldMetrics, FoldPlan,
};

pub const SCHEMA_VERSION: &str = "v1";

/// Progress sink; runners report coarse steps through it.
pub type Log<'a> = &'a dyn Fn(&str);

pub fn quiet(_: &str) {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<B> {
    pub schema_version: String,
    pub command: String,
    pub config: PipelineConfig,
    #[serde(flatten)]
    pub body: B,
}

impl<B: Serialize> Report<B> {
    pub fn new(command: &str, config: &PipelineConfig, body: B) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            config: config.clone(),
            body,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<RasterImage>> {
    (0..manifest.len()).map(|i| manifest.load_image(i)).collect()
}

pub fn load_crops(manifest: &CropManifest) -> Result<Vec<RasterImage>> {
    manifest.records.iter().map(|r| RasterImage::read(&manifest.crop_path(r))).collect()
}

/// Whole-image label for classifiers trained on full images: an image
/// showing neck blast is labelled neck blast, otherwise it takes the class
/// of its first annotation.
pub fn image_label(record: &ImageRecord) -> Result<ClassLabel> {
    if record.annotations.iter().any(|a| a.class == ClassLabel::NeckBlast) {
        return Ok(ClassLabel::NeckBlast);
    }
    record
        .annotations
        .first()
        .map(|a| a.class)
        .ok_or_else(|| Error::invalid(format!("image {} has no annotations", record.image)))
}

/// Name the detector's class index maps to.
pub fn detector_class_name(num_classes: usize, class: usize) -> String {
    if num_classes == 1 {
        "grain".into()
    } else {
        ClassLabel::from_index(class).map(|c| c.name().to_string()).unwrap_or_else(|| format!("class_{class}"))
    }
}

/// Per-class AP of `detector` on annotated images. A single-class detector
/// is scored against every ground-truth box.
pub fn evaluate_detector(
    detector: &mut Detector<f32>,
    images: &[RasterImage],
    records: &[ImageRecord],
    match_iou: f64,
) -> Result<BTreeMap<String, ClassDetectionEval>> {
    let k = detector.config().num_classes;
    let mut per_class: Vec<Vec<_>> = vec![Vec::with_capacity(images.len()); k];
    for (img, rec) in images.iter().zip(records) {
        let dets = detector.detect(img)?;
        for (c, scenes) in per_class.iter_mut().enumerate() {
            let d: Vec<_> = dets.iter().filter(|d| d.class == c).map(|d| (d.bbox, d.confidence)).collect();
            let g: Vec<_> = rec
                .annotations
                .iter()
                .filter(|a| k == 1 || a.class.index() == c)
                .map(|a| a.bbox)
                .collect();
            scenes.push((d, g));
        }
    }
    Ok(per_class
        .iter()
        .enumerate()
        .map(|(c, scenes)| (detector_class_name(k, c), evaluate_class(scenes, match_iou)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub n_images: usize,
    pub match_iou: f64,
    pub map: f64,
    pub per_class: BTreeMap<String, ClassDetectionEval>,
}

impl DetectorEval {
    pub fn run(detector: &mut Detector<f32>, images: &[RasterImage], records: &[ImageRecord], match_iou: f64) -> Result<Self> {
        let per_class = evaluate_detector(detector, images, records, match_iou)?;
        Ok(Self {
            n_images: images.len(),
            match_iou,
            map: mean_average_precision(per_class.values()),
            per_class,
        })
    }

    pub fn summary(&self) -> String {
        let mut s = format!("images {}  mAP@{} {:.4}\n", self.n_images, self.match_iou, self.map);
        for (c, e) in &self.per_class {
            s.push_str(&format!(
                "  {c:<11} AP {:.4}  gt {}  tp {}  fp {}\n",
                e.ap, e.total_gt, e.true_positives, e.false_positives
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeriveSummary {
    pub source_images: usize,
    pub crops: usize,
    pub added: usize,
    pub per_class: BTreeMap<String, usize>,
    pub without_detection: Vec<String>,
}

impl DeriveSummary {
    pub fn of(d: &SecondaryDataset) -> Self {
        Self {
            source_images: d.source_images,
            crops: d.crops.len(),
            added: d.crops.len().saturating_sub(d.source_images),
            per_class: d.per_class.clone(),
            without_detection: d.without_detection.clone(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} images -> {} crops\n", self.source_images, self.crops);
        for (c, n) in &self.per_class {
            s.push_str(&format!("  {c:<11} {n}\n"));
        }
        if !self.without_detection.is_empty() {
            s.push_str(&format!("  {} images without detection\n", self.without_detection.len()));
        }
        s
    }
}

fn classification_fold(
    classifier: &mut Classifier<f32>,
    images: &[&RasterImage],
    labels: &[usize],
    classes: &[String],
) -> Result<FoldMetrics> {
    let mut preds = Vec::with_capacity(images.len());
    for im in images {
        preds.push(classifier.classify(im)?.class);
    }
    let acc = if labels.is_empty() { 0.0 } else { accuracy(&preds, labels)? };
    Ok(FoldMetrics {
        fold: 0,
        n_train: 0,
        n_validation: 0,
        accuracy: Some(acc),
        map: None,
        per_class: BTreeMap::new(),
        confusion: Some(ConfusionMatrix::from_predictions(classes.to_vec(), &preds, labels)?),
    })
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add(fold as u64)
}

/// Cross-validated classifier accuracy. Samples are grouped (crops by their
/// source image) and folds are drawn over groups, so every crop of an
/// image lands on the same side of a split.
pub fn classifier_cv(
    config: &ClassifierConfig,
    plan: &FoldPlan,
    images: &[RasterImage],
    labels: &[usize],
    groups: &[usize],
    log: Log,
) -> Result<EvalReport> {
    if images.len() != labels.len() || images.len() != groups.len() {
        return Err(Error::invalid("images, labels and groups differ in length"));
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= plan.n) {
        return Err(Error::invalid(format!("group {g} outside a plan over {}", plan.n)));
    }
    let classes = config.class_names();
    let members = |idx: &[usize]| -> Vec<usize> {
        let set: std::collections::HashSet<usize> = idx.iter().copied().collect();
        (0..images.len()).filter(|i| set.contains(&groups[*i])).collect()
    };
    cross_validate(
        plan,
        |f, train| {
            let m = members(train);
            log(&format!("classifier fold {}/{}: {} training samples", f + 1, plan.k, m.len()));
            let ims: Vec<RasterImage> = m.iter().map(|&i| images[i].clone()).collect();
            let lbs: Vec<usize> = m.iter().map(|&i| labels[i]).collect();
            let cfg = ClassifierConfig {
                seed: fold_seed(config.seed, f),
                ..config.clone()
            };
            Ok(train_classifier(&cfg, &ims, &lbs, None)?.classifier)
        },
        |_, model, val| {
            let m = members(val);
            let ims: Vec<&RasterImage> = m.iter().map(|&i| &images[i]).collect();
            let lbs: Vec<usize> = m.iter().map(|&i| labels[i]).collect();
            let mut fm = classification_fold(model, &ims, &lbs, &classes)?;
            fm.n_validation = m.len();
            Ok(fm)
        },
    )
    .map(|mut r| {
        for (f, fm) in r.folds.iter_mut().enumerate() {
            fm.n_train = members(&plan.train(f)).len();
            fm.n_validation = members(plan.validation(f)).len();
        }
        r
    })
}

/// Fold index of source images by path, for crop manifests.
pub fn source_groups(sources: &[String]) -> (Vec<usize>, usize) {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = sources.iter().map(String::as_str).collect();
    order.sort_unstable();
    order.dedup();
    for (i, s) in order.iter().enumerate() {
        ids.insert(s, i);
    }
    (sources.iter().map(|s| ids[s.as_str()]).collect(), order.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineEval {
    pub n_images: usize,
    pub k: usize,
    /// Phase-one detector, trained and scored per fold.
    pub detection: EvalReport,
    /// Classifier on detector-derived crops, accuracy over validation crops.
    pub dual_phase: EvalReport,
    /// Same classifier trained on whole images for the same epochs,
    /// accuracy over validation images.
    pub single_phase: EvalReport,
    pub crops_per_fold: Vec<DeriveSummary>,
    /// Dual-phase minus single-phase mean accuracy, percentage points.
    pub margin_pp: f64,
}

impl PipelineEval {
    pub fn summary(&self) -> String {
        let line = |name: &str, r: &EvalReport, get: fn(&FoldMetrics) -> Option<f64>| {
            let per: Vec<String> = r.folds.iter().map(|f| format!("{:.4}", get(f).unwrap_or(f64::NAN))).collect();
            let ms = r.accuracy.as_ref().or(r.map.as_ref()).map(|m| m.percent()).unwrap_or_default();
            format!("{name:<13} {ms}  folds [{}]\n", per.join(", "))
        };
        let mut s = format!("images {}  folds {}\n", self.n_images, self.k);
        s.push_str(&line("detector mAP", &self.detection, |f| f.map));
        s.push_str(&line("dual-phase", &self.dual_phase, |f| f.accuracy));
        s.push_str(&line("single-phase", &self.single_phase, |f| f.accuracy));
        s.push_str(&format!("margin {:+.2} pp\n", self.margin_pp));
        s
    }
}

/// Dual-phase pipeline against the whole-image baseline under one fold
/// plan over source images.
pub fn pipeline_eval(config: &PipelineConfig, images: &[RasterImage], records: &[ImageRecord], log: Log) -> Result<PipelineEval> {
    if images.len() != records.len() {
        return Err(Error::invalid(format!("{} images for {} records", images.len(), records.len())));
    }
    let k = config.eval.k;
    let plan = make_folds(images.len(), k, config.eval.fold_seed)?;
    let classes = config.classifier.class_names();
    let image_labels = records
        .iter()
        .map(|r| image_label(r).map(ClassLabel::index))
        .collect::<Result<Vec<_>>>()?;

    let pick = |idx: &[usize]| -> (Vec<RasterImage>, Vec<ImageRecord>) {
        (idx.iter().map(|&i| images[i].clone()).collect(), idx.iter().map(|&i| records[i].clone()).collect())
    };

    let mut det_folds = Vec::with_capacity(k);
    let mut dual_folds = Vec::with_capacity(k);
    let mut crops_per_fold = Vec::with_capacity(k);
    for f in 0..k {
        let train = plan.train(f);
        let val = plan.validation(f);
        let (tr_im, tr_rec) = pick(&train);
        let (va_im, va_rec) = pick(val);

        log(&format!("fold {}/{k}: training detector on {} images", f + 1, train.len()));
        let dcfg = crate::detector::DetectorConfig {
            seed: fold_seed(config.detector.seed, f),
            ..config.detector.clone()
        };
        let mut det = train_detector(&dcfg, &tr_im, &tr_rec)?.detector;
        let de = DetectorEval::run(&mut det, &va_im, &va_rec, config.eval.match_iou)?;
        det_folds.push(FoldMetrics {
            fold: f,
            n_train: train.len(),
            n_validation: val.len(),
            accuracy: None,
            map: Some(de.map),
            per_class: de.per_class,
            confusion: None,
        });

        let tr_crops = derive_secondary(&mut det, &tr_im, &tr_rec, &config.derivation)?;
        let va_crops = derive_secondary(&mut det, &va_im, &va_rec, &config.derivation)?;
        crops_per_fold.push(DeriveSummary::of(&va_crops));
        log(&format!(
            "fold {}/{k}: {} training crops, {} validation crops",
            f + 1,
            tr_crops.crops.len(),
            va_crops.crops.len()
        ));
        let ims: Vec<RasterImage> = tr_crops.crops.iter().map(|c| c.image.clone()).collect();
        let lbs: Vec<usize> = tr_crops.crops.iter().map(|c| c.record.class_label.index()).collect();
        let ccfg = ClassifierConfig {
            seed: fold_seed(config.classifier.seed, f),
            ..config.classifier.clone()
        };
        let mut clf = train_classifier(&ccfg, &ims, &lbs, None)?.classifier;
        let va_ims: Vec<&RasterImage> = va_crops.crops.iter().map(|c| &c.image).collect();
        let va_lbs: Vec<usize> = va_crops.crops.iter().map(|c| c.record.class_label.index()).collect();
        let mut fm = classification_fold(&mut clf, &va_ims, &va_lbs, &classes)?;
        fm.fold = f;
        fm.n_train = ims.len();
        fm.n_validation = va_ims.len();
        dual_folds.push(fm);
    }

    log("single-phase baseline on whole images");
    let groups: Vec<usize> = (0..images.len()).collect();
    let single_phase = classifier_cv(&config.classifier, &plan, images, &image_labels, &groups, log)?;
    let detection = EvalReport::from_folds(det_folds)?;
    let dual_phase = EvalReport::from_folds(dual_folds)?;
    let mean = |r: &EvalReport| r.accuracy.as_ref().map(|m| m.mean).unwrap_or(0.0);
    let margin_pp = 100.0 * (mean(&dual_phase) - mean(&single_phase));
    Ok(PipelineEval {
        n_images: images.len(),
        k,
        detection,
        dual_phase,
        single_phase,
        crops_per_fold,
        margin_pp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Annotation;
    use crate::geometry::BBox;

    fn rec(classes: &[ClassLabel]) -> ImageRecord {
        ImageRecord {
            image: "a.ppm".into(),
            width: 100,
            height: 100,
            annotations: classes
                .iter()
                .enumerate()
                .map(|(i, &class)| Annotation {
                    bbox: BBox::new(i as f64 * 40.0, 0.0, i as f64 * 40.0 + 30.0, 30.0).unwrap(),
                    class,
                })
                .collect(),
        }
    }

    #[test]
    fn whole_image_labels() {
        use ClassLabel::*;
        assert_eq!(image_label(&rec(&[FalseSmut, NeckBlast])).unwrap(), NeckBlast);
        assert_eq!(image_label(&rec(&[Healthy, FalseSmut])).unwrap(), Healthy);
        assert_eq!(image_label(&rec(&[FalseSmut])).unwrap(), FalseSmut);
        assert!(image_label(&rec(&[])).is_err());
    }

    #[test]
    fn groups_follow_sorted_sources() {
        let s: Vec<String> = ["b", "a", "b", "c"].iter().map(|x| x.to_string()).collect();
        assert_eq!(source_groups(&s), (vec![1, 0, 1, 2], 3));
    }

    #[test]
    fn report_envelope() {
        let r = Report::new("kfold", &PipelineConfig::default(), serde_json::json!({"n": 3}));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["schema_version"], "v1");
        assert_eq!(v["n"], 3);
        assert!(v["config"]["detector"].is_object());
    }

    #[test]
    fn classifier_cv_keeps_groups_together() {
        let cfg = ClassifierConfig {
            input_width: 8,
            input_height: 8,
            conv_widths: vec![2],
            hidden: 4,
            epochs: 1,
            ..Default::default()
        };
        let images: Vec<RasterImage> = (0..12).map(|i| RasterImage::filled(8, 8, [i * 20, 0, 0])).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let groups: Vec<usize> = (0..12).map(|i| i / 2).collect();
        let plan = make_folds(6, 3, 4).unwrap();
        let r = classifier_cv(&cfg, &plan, &images, &labels, &groups, &quiet).unwrap();
        assert_eq!(r.k, 3);
        for (f, fm) in r.folds.iter().enumerate() {
            assert_eq!(fm.n_validation, 2 * plan.validation(f).len());
            assert_eq!(fm.n_train + fm.n_validation, 12);
            assert_eq!(fm.confusion.as_ref().unwrap().total(), fm.n_validation);
        }
    }
}

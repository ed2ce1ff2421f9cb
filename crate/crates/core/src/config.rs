//! Single-file pipeline configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::detector::DetectorConfig;
use crate::dualphase::DerivationRule;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_MATCH_IOU;
use crate::synth::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// IoU at or above which a detection matches a ground-truth box.
    pub match_iou: f64,
    pub k: usize,
    pub fold_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            match_iou: DEFAULT_MATCH_IOU,
            k: 5,
            fold_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// When set, overrides every component seed (see [`PipelineConfig::resolved`]).
    pub seed: Option<u64>,
    pub detector: DetectorConfig,
    pub classifier: ClassifierConfig,
    pub derivation: DerivationRule,
    pub scene: SceneSpec,
    pub eval: EvalSettings,
}

impl PipelineConfig {
    /// Small widths and inputs that train on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.scene.width = 256;
        c.scene.height = 192;
        c.scene.clutter_similarity = 0.7;
        c.detector.input_width = 256;
        c.detector.input_height = 192;
        c.detector.lr = 3e-4;
        c.detector.epochs = 15;
        c.detector.roi_batch = 32;
        c.detector.roi_fg_fraction = 0.5;
        c.classifier.input_width = 64;
        c.classifier.input_height = 48;
        c.classifier.lr = 1e-3;
        c.classifier.epochs = 30;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.classifier.validate()?;
        self.derivation.validate()?;
        self.scene.validate()?;
        if !(self.eval.match_iou > 0.0 && self.eval.match_iou <= 1.0) {
            return Err(Error::Config(format!("eval.match_iou = {} must lie in (0, 1]", self.eval.match_iou)));
        }
        if self.eval.k < 2 {
            return Err(Error::Config("eval.k must be at least 2".into()));
        }
        Ok(())
    }

    /// Copy with the global seed pushed into every component and cleared.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed.take() {
            c.detector.seed = s;
            c.classifier.seed = s.wrapping_add(1);
            c.scene.seed = s.wrapping_add(2);
            c.eval.fold_seed = s.wrapping_add(3);
        }
        c
    }
}

//! Phase two: a small conv net that classifies fixed-size crops.
//!
//! Four conv3×3 + ReLU + max-pool blocks, then a hidden dense layer with
//! ReLU and dropout, then the class logits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ClassLabel, RasterImage};
use crate::error::{Error, Result};
use crate::netcore::loss::{softmax, softmax_cross_entropy};
use crate::netcore::{build_optimizer, Checkpoint, Conv2d, Dense, Dropout, Flatten, MaxPool2d, Mode, OptimizerKind, Relu, Scalar, Sequential, Tensor};
use crate::roi::resize_image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Adds the rejection class `no_grain` as a fourth output.
    pub no_grain: bool,
    pub conv_widths: Vec<usize>,
    pub hidden: usize,
    /// Dropout before the output layer; 0 disables it.
    pub dropout: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_width: 300,
            input_height: 250,
            no_grain: false,
            conv_widths: vec![8, 16, 32, 32],
            hidden: 64,
            dropout: 0.5,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn num_classes(&self) -> usize {
        if self.no_grain {
            4
        } else {
            3
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|i| ClassLabel::from_index(i).expect("class index in range").name().to_string())
            .collect()
    }

    /// Spatial dims after the conv blocks.
    fn feature_dims(&self) -> (usize, usize) {
        self.conv_widths
            .iter()
            .fold((self.input_height, self.input_width), |(h, w), _| (h / 2, w / 2))
    }

    pub fn validate(&self) -> Result<()> {
        let (fh, fw) = self.feature_dims();
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("classifier layer widths must be positive".into()));
        }
        if fh == 0 || fw == 0 {
            return Err(Error::Config(format!(
                "classifier input {}x{} too small for {} pooling blocks",
                self.input_width,
                self.input_height,
                self.conv_widths.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr must be positive and batch_size at least 1".into()));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn label(&self) -> ClassLabel {
        ClassLabel::from_index(self.class).expect("class index in range")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
}

pub struct Classifier<T: Scalar> {
    config: ClassifierConfig,
    features: Sequential<T>,
    head: Sequential<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut features = Sequential::new();
        let mut c_in = 3;
        for &c in &config.conv_widths {
            features.push(Conv2d::new(c_in, c, 3, 1, 1, &mut rng));
            features.push(Relu::new());
            features.push(MaxPool2d::new(2, 2));
            c_in = c;
        }
        let (fh, fw) = config.feature_dims();
        let mut head = Sequential::new();
        head.push(Flatten::new());
        head.push(Dense::new(fh * fw * c_in, config.hidden, &mut rng));
        head.push(Relu::new());
        if config.dropout > 0.0 {
            head.push(Dropout::new(config.dropout, config.seed ^ 0xd7)?);
        }
        head.push(Dense::new(config.hidden, config.num_classes(), &mut rng));
        Ok(Self {
            config: config.clone(),
            features,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut p = self.features.named_params_mut("features");
        p.extend(self.head.named_params_mut("head"));
        p
    }

    /// Zeroes the output layer, making every prediction uniform.
    pub fn zero_output_layer(&mut self) {
        let mut params = self.head.named_params_mut("head");
        let n = params.len();
        for (_, t) in params.iter_mut().skip(n - 2) {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::from_params(self.named_params_mut())
    }

    pub fn from_checkpoint(config: &ClassifierConfig, ck: &Checkpoint) -> Result<Self> {
        let mut c = Self::new(config)?;
        ck.load_into(c.named_params_mut())?;
        Ok(c)
    }

    pub fn load(config: &ClassifierConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &Checkpoint::load(path)?)
    }

    pub fn prepare_input(&self, image: &RasterImage) -> Result<Tensor<T>> {
        let r = resize_image(image, self.config.input_width, self.config.input_height)?;
        Ok(r.to_tensor::<T>().map(|v| v - T::of(0.5)))
    }

    pub fn logits(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let f = self.features.forward(input, mode)?;
        Ok(self.head.forward(&f, mode)?.into_data())
    }

    pub fn classify_tensor(&mut self, input: &Tensor<T>) -> Result<Prediction> {
        let logits = self.logits(input, Mode::Eval)?;
        let probabilities: Vec<f64> = softmax(&logits).into_iter().map(|p| p.f64()).collect();
        Ok(Prediction {
            class: argmax(&probabilities),
            probabilities,
        })
    }

    pub fn classify(&mut self, image: &RasterImage) -> Result<Prediction> {
        let x = self.prepare_input(image)?;
        self.classify_tensor(&x)
    }

    /// Forward and backward for one sample, gradients scaled by `weight`.
    /// Returns the unscaled loss and whether the prediction was correct.
    pub fn accumulate(&mut self, input: &Tensor<T>, class: usize, weight: f64) -> Result<(f64, bool)> {
        let logits = self.logits(input, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, class)?;
        let correct = argmax(&logits.iter().map(|v| v.f64()).collect::<Vec<_>>()) == class;
        let g = Tensor::from_vec(&[1, grad.len()], grad.into_iter().map(|v| v * T::of(weight)).collect())?;
        let gf = self.head.backward(&g)?;
        self.features.backward(&gf)?;
        Ok((loss.f64(), correct))
    }

    fn evaluate(&mut self, inputs: &[Tensor<T>], labels: &[usize]) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0;
        for (x, &y) in inputs.iter().zip(labels) {
            let logits = self.logits(x, Mode::Eval)?;
            loss += softmax_cross_entropy(&logits, y)?.0.f64();
            correct += usize::from(argmax(&logits.iter().map(|v| v.f64()).collect::<Vec<_>>()) == y);
        }
        let n = inputs.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

pub struct TrainedClassifier {
    pub classifier: Classifier<f32>,
    pub log: Vec<ClassifierEpochLog>,
}

/// Mini-batch training with a seeded visiting order. `validation`, when
/// given, is evaluated after every epoch for the log only.
pub fn train_classifier(
    config: &ClassifierConfig,
    images: &[RasterImage],
    labels: &[usize],
    validation: Option<(&[RasterImage], &[usize])>,
) -> Result<TrainedClassifier> {
    if images.len() != labels.len() {
        return Err(Error::invalid(format!("{} images for {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes()) {
        return Err(Error::invalid(format!("label {bad} outside {} classes", config.num_classes())));
    }
    let mut clf = Classifier::<f32>::new(config)?;
    let inputs = images.iter().map(|im| clf.prepare_input(im)).collect::<Result<Vec<_>>>()?;
    let val = match validation {
        Some((im, lb)) => Some((im.iter().map(|i| clf.prepare_input(i)).collect::<Result<Vec<_>>>()?, lb)),
        None => None,
    };
    let mut opt = build_optimizer::<f32>(config.optimizer, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            for &i in batch {
                let (l, ok) = clf.accumulate(&inputs[i], labels[i], 1.0 / batch.len() as f64)?;
                loss += l;
                correct += usize::from(ok);
            }
            let mut params: Vec<&mut Tensor<f32>> = clf.named_params_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut params)?;
            params.iter_mut().for_each(|t| t.zero_grad());
        }
        let n = images.len().max(1) as f64;
        let (validation_loss, validation_accuracy) = match &val {
            Some((x, y)) => {
                let (l, a) = clf.evaluate(x, y)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        log.push(ClassifierEpochLog {
            epoch,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            validation_loss,
            validation_accuracy,
        });
    }
    Ok(TrainedClassifier { classifier: clf, log })
}

//! Mini-batch Adam training and cross-validated evaluation.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward_batch, loss_and_gradients_impl, Dropout};
use super::{FeatureWindow, GestureClass, ModelParams, ModelShape, Standardizer, NUM_CLASSES};
use crate::error::{Error, Result};

/// A window, its ground-truth class and the recording it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: FeatureWindow,
    pub label: GestureClass,
    pub recording: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_model: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape::standard(self.d_model, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Trains a fresh model. The standardizer is fitted on `data` only.
pub fn train(data: &[LabeledWindow], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    let classes: BTreeSet<_> = data.iter().map(|d| d.label).collect();
    if classes.len() < 2 {
        return Err(Error::Dataset("training needs at least two classes".into()));
    }
    let shape = cfg.shape();
    let mut params = ModelParams::init(shape, cfg.seed)?;
    params.set_standardizer(Standardizer::fit(
        data.iter().map(|d| d.window.view()),
        shape.features,
    ))?;
    let mut adam = Adam::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<_> = chunk.iter().map(|&i| data[i].window.view()).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| data[i].label.code()).collect();
            let dropout = (cfg.dropout > 0.0).then(|| Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            });
            let (loss, grads, probs) = loss_and_gradients_impl(&params, &views, &labels, dropout)?;
            loss_sum += loss * chunk.len() as f64;
            for (row, &y) in probs.rows().into_iter().zip(&labels) {
                let mut p = [0.0; NUM_CLASSES];
                p.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
                if GestureClass::argmax(&p).0.code() == y {
                    correct += 1;
                }
            }
            adam.step(params.values_mut(), &grads, cfg);
        }
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Anything that maps a feature window to class probabilities.
pub trait Classifier {
    fn predict(&self, window: ArrayView2<'_, f64>) -> Result<[f64; NUM_CLASSES]>;

    /// Batched prediction; the default calls [`Classifier::predict`] per window.
    fn predict_many(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        windows.iter().map(|w| self.predict(w.view())).collect()
    }
}

impl Classifier for ModelParams {
    fn predict(&self, window: ArrayView2<'_, f64>) -> Result<[f64; NUM_CLASSES]> {
        self.forward_view(window)
    }

    fn predict_many(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(64) {
            for w in chunk {
                if w.dim() != (self.shape().window_len, self.shape().features) {
                    return Err(Error::Shape(format!("unexpected window shape {:?}", w.dim())));
                }
            }
            let cache = forward_batch(self, chunk, None);
            for row in cache.probs.rows() {
                let mut p = [0.0; NUM_CLASSES];
                p.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: GestureClass, predicted: GestureClass) {
        self.counts[truth.code()][predicted.code()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Per-class recall; `None` for classes absent from the ground truth.
    pub fn recall(&self) -> [Option<f64>; NUM_CLASSES] {
        let mut out = [None; NUM_CLASSES];
        for (i, row) in self.counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n > 0 {
                out[i] = Some(row[i] as f64 / n as f64);
            }
        }
        out
    }
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<12}", "truth\\pred")?;
        for c in GestureClass::ALL {
            write!(f, "{:>12}", c.name())?;
        }
        writeln!(f)?;
        for (c, row) in GestureClass::ALL.iter().zip(&self.counts) {
            write!(f, "{:<12}", c.name())?;
            for n in row {
                write!(f, "{n:>12}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Confusion matrix of `classifier` over `data`.
pub fn confusion<C: Classifier + ?Sized>(classifier: &C, data: &[LabeledWindow]) -> Result<ConfusionMatrix> {
    let views: Vec<_> = data.iter().map(|d| d.window.view()).collect();
    let probs = classifier.predict_many(&views)?;
    let mut cm = ConfusionMatrix::default();
    for (d, p) in data.iter().zip(&probs) {
        cm.record(d.label, GestureClass::argmax(p).0);
    }
    Ok(cm)
}

/// Window-wise fraction of correct argmax predictions.
pub fn accuracy<C: Classifier + ?Sized>(classifier: &C, data: &[LabeledWindow]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("no evaluation windows".into()));
    }
    Ok(confusion(classifier, data)?.accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_recordings: Vec<usize>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub pooled: ConfusionMatrix,
}

/// Cross-validation over contiguous groups of recordings.
///
/// Recording ids are sorted and cut into `k` consecutive groups, so with ten
/// recordings and `k = 5` fold `i` holds out recordings `2i` and `2i + 1`.
/// Windows never straddle folds because they carry their recording id.
pub fn kfold_evaluate<C, F>(data: &[LabeledWindow], k: usize, mut trainer: F) -> Result<KFoldReport>
where
    C: Classifier,
    F: FnMut(usize, &[LabeledWindow]) -> Result<C>,
{
    let recordings: Vec<usize> = data
        .iter()
        .map(|d| d.recording)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k < 2 || recordings.len() < k {
        return Err(Error::Dataset(format!(
            "{k}-fold split needs at least {k} recordings, have {}",
            recordings.len()
        )));
    }
    let n = recordings.len();
    let mut folds = Vec::with_capacity(k);
    let mut pooled = ConfusionMatrix::default();
    for fold in 0..k {
        let held: Vec<usize> = recordings[fold * n / k..(fold + 1) * n / k].to_vec();
        let (test, train_set): (Vec<_>, Vec<_>) =
            data.iter().cloned().partition(|d| held.contains(&d.recording));
        if test.is_empty() || train_set.is_empty() {
            return Err(Error::Dataset(format!("fold {fold} is empty")));
        }
        let model = trainer(fold, &train_set)?;
        let cm = confusion(&model, &test)?;
        pooled.merge(&cm);
        folds.push(FoldReport {
            fold,
            test_recordings: held,
            train_windows: train_set.len(),
            test_windows: test.len(),
            accuracy: cm.accuracy(),
            confusion: cm,
        });
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    Ok(KFoldReport {
        folds,
        mean_accuracy,
        pooled,
    })
}

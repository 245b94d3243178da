use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, loss};
use super::model::{Prediction, SiameseModel, CHUNK};
use super::optim::{adam_step, lr_at_epoch, AdamConfig, AdamState};
use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use super::TensorError;
use crate::geometry::{pose_error, relative_label, Pose, PoseError};
use crate::sampler::{derive_seed, pair_stream, Sample};
use crate::scene::{augment, Image};

const STREAM_PAIRS: u64 = 0x7061_6972;
const STREAM_SHUFFLE: u64 = 0x7368_7566;
const STREAM_NOISE: u64 = 0x6e6f_6973;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub halving_epochs: Vec<usize>,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Translation weight `w` of the loss.
    pub loss_weight: f64,
    pub pairs_per_epoch: usize,
    pub seed: u64,
    /// Amplitude of seeded background noise added to training images; 0 disables.
    pub noise_amplitude: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            halving_epochs: vec![4, 6, 8],
            epochs: 10,
            adam: AdamConfig::default(),
            batch_size: 32,
            loss_weight: 0.99,
            pairs_per_epoch: 64_000,
            seed: 0,
            noise_amplitude: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.loss_weight > 0.0 && self.loss_weight < 1.0) {
            return bad("loss_weight must lie in (0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return bad("epochs, batch_size and pairs_per_epoch must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) || a.weight_decay < 0.0 {
            return bad("adam needs beta1, beta2 in [0, 1), epsilon > 0, weight_decay >= 0");
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return bad("noise_amplitude must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mean absolute error over a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub loss: f64,
    pub error: PoseError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Loss of the first batch of the epoch, before its update.
    pub first_batch_loss: f64,
    pub val: EvalSummary,
}

/// Per-connector training and validation sample groups. Pairs are only
/// formed within a group.
pub struct TrainData<'a> {
    pub train: Vec<&'a [Sample]>,
    pub val: Vec<&'a [Sample]>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged: non-finite {what} at epoch {epoch}, batch {batch}")]
    Diverged { what: &'static str, epoch: usize, batch: usize },
    #[error("{0}")]
    Data(String),
}

/// Errors of every ordered pair `(i, j)` within each group, with features
/// computed once per image.
pub fn evaluate(model: &SiameseModel, groups: &[&[Sample]], w: f64) -> Result<(EvalSummary, Vec<PoseError>), TensorError> {
    let mut errors = Vec::new();
    let mut total_loss = 0.0;
    for samples in groups {
        let (preds, labels) = predict_all_pairs(model, samples)?;
        for (p, l) in preds.iter().zip(&labels) {
            total_loss += loss(p, l, w);
            errors.push(pose_error(*l, p.to_pose()));
        }
    }
    let n = errors.len();
    let error = PoseError::mean(&errors).unwrap_or_default();
    Ok((EvalSummary { pairs: n, loss: if n > 0 { total_loss / n as f64 } else { 0.0 }, error }, errors))
}

/// Predictions and labels for all `n²` ordered pairs, row-major in `(i, j)`.
pub fn predict_all_pairs(model: &SiameseModel, samples: &[Sample]) -> Result<(Vec<Prediction>, Vec<Pose>), TensorError> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let feats = model.features(&images)?;
    let n = samples.len();
    let pairs: Vec<(&Tensor, &Tensor)> = (0..n * n).map(|k| (&feats[k / n], &feats[k % n])).collect();
    let labels = (0..n * n).map(|k| relative_label(samples[k / n].t_d2e, samples[k % n].t_d2e)).collect();
    Ok((model.predict_features(&pairs)?, labels))
}

/// Mean absolute error of always predicting the identity.
pub fn identity_baseline(groups: &[&[Sample]]) -> PoseError {
    let errs: Vec<PoseError> = groups
        .iter()
        .flat_map(|s| {
            let n = s.len();
            (0..n * n).map(move |k| pose_error(relative_label(s[k / n].t_d2e, s[k % n].t_d2e), Pose::IDENTITY))
        })
        .collect();
    PoseError::mean(&errs).unwrap_or_default()
}

struct EpochPair<'a> {
    a: &'a Image,
    b: &'a Image,
    label: Pose,
    noise: Option<(u64, u64)>,
}

/// Stateful trainer; `epoch` counts completed epochs so a resumed run
/// continues the numbering and the learning-rate schedule.
pub struct Trainer {
    pub model: SiameseModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub best: Option<(usize, f64, SiameseModel)>,
}

impl Trainer {
    pub fn new(model: SiameseModel, config: TrainConfig) -> Result<Self, TensorError> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer { model, adam, config, epoch: 0, history: Vec::new(), best: None })
    }

    /// Continues after `epoch` completed epochs. `best` is the best-validation
    /// model seen so far, if it was kept.
    pub fn resume(
        model: SiameseModel,
        adam: AdamState,
        config: TrainConfig,
        epoch: usize,
        history: Vec<EpochMetrics>,
        best: Option<(usize, f64, SiameseModel)>,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        if adam.m.len() != model.params.len() || adam.v.len() != model.params.len() {
            return Err(TensorError::Spec("optimizer state does not match the model".into()));
        }
        Ok(Trainer { model, adam, config, epoch, history, best })
    }

    fn epoch_pairs<'a>(&self, data: &TrainData<'a>, epoch: usize) -> Result<Vec<EpochPair<'a>>, TrainError> {
        let total: usize = data.train.iter().map(|g| g.len()).sum();
        let mut pairs = Vec::with_capacity(self.config.pairs_per_epoch);
        let mut assigned = 0;
        for (gi, group) in data.train.iter().enumerate() {
            let count = if gi + 1 == data.train.len() {
                self.config.pairs_per_epoch - assigned
            } else {
                self.config.pairs_per_epoch * group.len() / total
            };
            assigned += count;
            let seed = derive_seed(self.config.seed, STREAM_PAIRS, ((epoch as u64) << 16) | gi as u64);
            let stream = pair_stream(group, count, seed).map_err(|e| TrainError::Data(e.to_string()))?;
            pairs.extend(stream.map(|p| EpochPair { a: p.image_a, b: p.image_b, label: p.label, noise: None }));
        }
        if data.train.len() > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_SHUFFLE, epoch as u64));
            pairs.shuffle(&mut rng);
        }
        if self.config.noise_amplitude > 0.0 {
            for (k, p) in pairs.iter_mut().enumerate() {
                let s = derive_seed(self.config.seed, STREAM_NOISE, ((epoch as u64) << 32) | k as u64);
                p.noise = Some((s, s.wrapping_add(1)));
            }
        }
        Ok(pairs)
    }

    fn batch_gradients(&self, batch: &[EpochPair]) -> Result<(f64, Gradients), TensorError> {
        let n = batch.len() as f64;
        let amp = self.config.noise_amplitude;
        let parts: Vec<Result<(f64, Gradients), TensorError>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let noisy: Vec<(Image, Image)>;
                let (ia, ib): (Vec<&Image>, Vec<&Image>) = if amp > 0.0 {
                    noisy = chunk
                        .iter()
                        .map(|p| {
                            let (sa, sb) = p.noise.unwrap_or_default();
                            (augment(p.a, sa, amp), augment(p.b, sb, amp))
                        })
                        .collect();
                    noisy.iter().map(|(a, b)| (a, b)).unzip()
                } else {
                    chunk.iter().map(|p| (p.a, p.b)).unzip()
                };
                let labels: Vec<Pose> = chunk.iter().map(|p| p.label).collect();
                let mut tape = Tape::new(&self.model.params);
                let bound = self.model.bind(&mut tape);
                let xa = tape.input(self.model.image_batch(&ia)?, false);
                let xb = tape.input(self.model.image_batch(&ib)?, false);
                let fa = self.model.extract(&mut tape, &bound, xa)?;
                let fb = self.model.extract(&mut tape, &bound, xb)?;
                let out = self.model.head(&mut tape, &bound, fa, fb)?;
                let (l, mut seed) = batch_loss(tape.value(out), &labels, self.config.loss_weight)?;
                let share = chunk.len() as f64 / n;
                seed.data.iter_mut().for_each(|g| *g *= share);
                Ok((l * share, tape.backward(out, seed)?))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(&self.model.params);
        for part in parts {
            let (l, g) = part?;
            total += l;
            grads.accumulate(&g);
        }
        Ok((total, grads))
    }

    /// Trains one epoch and validates; keeps the best-validation model.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochMetrics, TrainError> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(TrainError::Data("training needs train and validation samples".into()));
        }
        let epoch = self.epoch + 1;
        let lr = lr_at_epoch(self.config.learning_rate, &self.config.halving_epochs, epoch);
        let pairs = self.epoch_pairs(data, epoch)?;
        let (mut sum, mut count, mut first) = (0.0, 0usize, f64::NAN);
        for (bi, batch) in pairs.chunks(self.config.batch_size).enumerate() {
            let (l, grads) = self.batch_gradients(batch)?;
            if !l.is_finite() {
                return Err(TrainError::Diverged { what: "loss", epoch, batch: bi });
            }
            if grads.params.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { what: "gradient", epoch, batch: bi });
            }
            if bi == 0 {
                first = l;
            }
            sum += l * batch.len() as f64;
            count += batch.len();
            adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.config.adam);
        }
        let (val, _) = evaluate(&self.model, &data.val, self.config.loss_weight)?;
        if !val.loss.is_finite() {
            return Err(TrainError::Diverged { what: "validation loss", epoch, batch: count / self.config.batch_size });
        }
        let metrics = EpochMetrics { epoch, learning_rate: lr, train_loss: sum / count as f64, first_batch_loss: first, val };
        if self.best.as_ref().map_or(true, |(_, l, _)| val.loss < *l) {
            self.best = Some((epoch, val.loss, self.model.clone()));
        }
        self.epoch = epoch;
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs until `config.epochs` epochs have completed.
    pub fn run(&mut self, data: &TrainData, mut on_epoch: impl FnMut(&Trainer, &EpochMetrics)) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(data)?;
            on_epoch(self, &m);
        }
        Ok(())
    }

    pub fn best_model(&self) -> &SiameseModel {
        self.best.as_ref().map_or(&self.model, |(_, _, m)| m)
    }
}

/// Trains from scratch and returns the best-validation model with history.
pub fn train(model: SiameseModel, data: &TrainData, config: &TrainConfig) -> Result<(SiameseModel, Vec<EpochMetrics>), TrainError> {
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.run(data, |_, _| {})?;
    let best = trainer.best_model().clone();
    Ok((best, trainer.history))
}

//! Training loop with iterative click simulation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, RngState, TrainSnapshot};
use crate::clicksim::{sample_training_clicks, training_correction, TrainingClickStrategy};
use crate::data::{random_crop, Sample};
use crate::error::{Error, Result};
use crate::head::{binarize, PromptMaps};
use crate::mask::Mask;
use crate::model::Model;
use crate::numeric::{Adam, AdamConfig, Tape};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Samples per epoch; `None` means one pass over the dataset.
    pub epoch_size: Option<usize>,
    /// The learning rate is multiplied by `lr_decay_factor` after each of
    /// these (1-based) epochs.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub max_initial_clicks: usize,
    pub iterative_rounds: usize,
    pub focal_gamma: f64,
    /// Probability that an iterative-round click comes from the evaluation
    /// simulator rather than a uniformly random error pixel.
    pub metric_click_prob: f64,
    pub click_strategy: TrainingClickStrategy,
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Per-epoch checkpoints kept on disk (older ones are deleted).
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 55,
            epoch_size: Some(30_000),
            lr_decay_epochs: vec![50, 55],
            lr_decay_factor: 0.1,
            batch_size: 8,
            crop: 448,
            max_initial_clicks: 24,
            iterative_rounds: 3,
            focal_gamma: 2.0,
            metric_click_prob: 0.5,
            click_strategy: TrainingClickStrategy::Uniform,
            freeze_backbone: true,
            seed: 0,
            keep_checkpoints: 2,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe for the toy model on 112×112 synthetic data. The
    /// backbone starts from random weights, so it is trained too.
    pub fn toy() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            epochs: 30,
            epoch_size: None,
            lr_decay_epochs: vec![20, 25],
            batch_size: 4,
            crop: 112,
            freeze_backbone: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if self.epoch_size == Some(0) {
            return bad("epoch_size must be at least 1".into());
        }
        if let Some(&e) = self.lr_decay_epochs.iter().find(|&&e| e > self.epochs) {
            return bad(format!("decay epoch {e} is after the last epoch {}", self.epochs));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad(format!("invalid Adam settings {:?}", self.adam));
        }
        if self.max_initial_clicks == 0 {
            return bad("max_initial_clicks must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.metric_click_prob) {
            return bad("metric_click_prob must lie in [0, 1]".into());
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be non-negative".into());
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d < epoch).count();
        self.adam.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// One training-curve record (a line of `curve.jsonl`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Loss of one sample over the initial round and the iterative rounds,
/// recorded on `tape`. Previous-round masks enter as constants, so no
/// gradient flows between rounds.
fn sample_loss<T: Scalar, R: Rng>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    sample: &Sample,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<crate::numeric::Var> {
    let gt = &sample.mask;
    let image = tape.constant(sample.image.tensor().cast());
    let inputs = model.encode_on(tape, image)?;
    let target = gt.to_tensor::<T>().reshape(vec![gt.height(), gt.width(), 1])?;
    let mut clicks = sample_training_clicks(gt, rng, config.max_initial_clicks, config.click_strategy)?;
    let mut prev = Mask::zeros(gt.height(), gt.width());
    let rounds = config.iterative_rounds + 1;
    let weight = T::one() / T::lit(rounds as f64);
    let mut total = None;
    for round in 0..rounds {
        if round > 0 {
            if let Some(c) = training_correction(&prev, gt, rng, config.metric_click_prob)? {
                clicks.push(c);
            }
        }
        let maps = PromptMaps::from_clicks(&clicks, &prev, model.config.head.click_radius)?;
        let logits = model.head.forward_on(tape, &model.store, &inputs, &maps)?;
        let loss = tape.focal_loss(logits, &target, T::lit(config.focal_gamma))?;
        let loss = tape.scale(loss, weight)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
        prev = binarize(tape.value(logits), model.config.head.binarize_threshold)?;
    }
    Ok(total.expect("at least one round"))
}

/// One optimisation step over `batch`; returns the mean sample loss.
pub fn train_step<T: Scalar, R: Rng>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &[Sample],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    model.store.zero_grads();
    let weight = T::one() / T::lit(batch.len() as f64);
    let mut total = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let loss = sample_loss(model, &mut tape, sample, config, rng)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        total += value;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut model.store, weight);
    }
    adam.step(&mut model.store)?;
    Ok(total / batch.len() as f64)
}

/// Model, optimizer and RNG state of a (possibly resumed) training run.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.set_frozen(config.freeze_backbone);
        Ok(Self {
            model,
            adam: Adam::new(config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues the run stored in `checkpoint`.
    pub fn resume(checkpoint: Checkpoint<T>) -> Result<Self> {
        let snapshot = checkpoint
            .train
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let (model, adam) = checkpoint.into_model_and_optimizer()?;
        let mut trainer = Self::new(model, snapshot.config.clone())?;
        if let Some(adam) = adam {
            trainer.adam = adam;
        }
        trainer.rng = snapshot.rng.restore();
        trainer.epoch = snapshot.epoch;
        trainer.step = snapshot.step;
        Ok(trainer)
    }

    pub fn snapshot(&self) -> TrainSnapshot {
        TrainSnapshot {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Runs the next epoch, calling `on_step` after every optimizer step.
    pub fn run_epoch(&mut self, dataset: &[Sample], on_step: &mut dyn FnMut(&CurveRecord)) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Contract("training dataset is empty".into()));
        }
        let epoch = self.epoch + 1;
        let lr = self.config.lr_at(epoch);
        self.adam.set_lr(lr);
        let size = self.config.epoch_size.unwrap_or(dataset.len());
        let mut order = Vec::with_capacity(size);
        while order.len() < size {
            let mut perm: Vec<usize> = (0..dataset.len()).collect();
            perm.shuffle(&mut self.rng);
            order.extend(perm);
        }
        order.truncate(size);
        let patch = self.model.config.patch_size();
        for chunk in order.chunks(self.config.batch_size) {
            let mut sample_rng = ChaCha8Rng::seed_from_u64(self.rng.random());
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset[i];
                    if s.image.height() == self.config.crop && s.image.width() == self.config.crop {
                        Ok(s.clone())
                    } else {
                        random_crop(s, self.config.crop, patch, &mut sample_rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut self.model, &mut self.adam, &batch, &self.config, &mut sample_rng)?;
            self.step += 1;
            on_step(&CurveRecord {
                epoch,
                step: self.step,
                lr,
                loss,
            });
        }
        self.epoch = epoch;
        Ok(())
    }

    /// Trains up to `config.epochs`, writing `curve.jsonl` and one
    /// checkpoint per epoch into `out_dir` when given.
    pub fn run(
        &mut self,
        dataset: &[Sample],
        out_dir: Option<&Path>,
        on_step: &mut dyn FnMut(&CurveRecord),
    ) -> Result<Option<PathBuf>> {
        let mut curve = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("curve.jsonl");
                Some((
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        let mut written: Vec<PathBuf> = Vec::new();
        let mut last = None;
        while self.epoch < self.config.epochs {
            let mut write_err = None;
            self.run_epoch(dataset, &mut |rec| {
                if let Some((f, p)) = curve.as_mut() {
                    let line = serde_json::to_string(rec).expect("record serialises");
                    if let Err(e) = writeln!(f, "{line}") {
                        write_err.get_or_insert(Error::io(p.clone(), e));
                    }
                }
                on_step(rec);
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
            if let Some(dir) = out_dir {
                let path = dir.join(format!("epoch-{:03}.ckpt", self.epoch));
                save_checkpoint(&path, &self.model, Some((&self.adam, &self.snapshot())))?;
                written.push(path.clone());
                while written.len() > self.config.keep_checkpoints.max(1) {
                    let old = written.remove(0);
                    let _ = fs::remove_file(old);
                }
                last = Some(path);
            }
        }
        if let Some((f, p)) = curve.as_mut() {
            f.flush().map_err(|e| Error::io(p.clone(), e))?;
        }
        Ok(last)
    }
}

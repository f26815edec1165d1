//! Backbone training with a stratified validation split and early stopping.

use std::collections::BTreeMap;

use imago_core::Stimulus;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{NnError, Result};
use crate::layers::Mode;
use crate::loss::{Loss, LossTerms, LossWeights};
use crate::model::{ArchSpec, EncoderDecoder};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub calibration_fraction: f64,
    pub calibration_learning_rate: f64,
    pub calibration_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 500,
            patience: 10,
            batch_size: 8,
            val_fraction: 0.2,
            calibration_fraction: 0.2,
            calibration_learning_rate: 1e-2,
            calibration_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::Invalid(m.to_string()));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return bad("calibration_fraction must lie in (0, 1)");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.calibration_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn calibration_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.calibration_learning_rate,
            ..self.adam()
        }
    }
}

/// One imagined → target training pair.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub subject: usize,
    pub stimulus: Stimulus,
    pub input: &'a Array2<f64>,
    pub target: &'a Array2<f64>,
}

/// Splits example indices into (train, validation), stratified by
/// (subject, stimulus). Each stratum gives `round(n · val_fraction)`
/// validation items, at least one, and keeps at least one for training.
pub fn stratified_split(examples: &[Example], val_fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        strata.entry((e.subject, e.stimulus.index())).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for ((subject, stim), mut idx) in strata {
        let n = idx.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
        if n_val >= n {
            return Err(NnError::Invalid(format!(
                "stratum (subject {subject}, stimulus {stim}) has {n} pairs; the split would leave no training data"
            )));
        }
        idx.shuffle(rng);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops after `patience` epochs without
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

/// Per-pair mean losses for one epoch. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossTerms,
    pub val: LossTerms,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(
        "epoch,train_mse,train_corr,train_temp,train_spec,train_total,val_mse,val_corr,val_temp,val_spec,val_total\n",
    );
    for e in log {
        let t = &e.train;
        let v = &e.val;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch, t.mse, t.corr, t.temp, t.spec, t.total, v.mse, v.corr, v.temp, v.spec, v.total
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedBackbone {
    pub model: EncoderDecoder,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

fn batch_tensors(examples: &[Example], idx: &[usize]) -> Result<(Tensor3, Tensor3)> {
    let inputs: Vec<&Array2<f64>> = idx.iter().map(|&i| examples[i].input).collect();
    let targets: Vec<&Array2<f64>> = idx.iter().map(|&i| examples[i].target).collect();
    Ok((Tensor3::stack(&inputs)?, Tensor3::stack(&targets)?))
}

/// Summed loss of the deterministic forward over `idx`, divided by its size.
pub fn mean_loss(model: &EncoderDecoder, loss: &mut Loss, examples: &[Example], idx: &[usize], batch: usize) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = batch_tensors(examples, chunk)?;
        let pred = model.predict(&x)?;
        acc = acc.add(&loss.terms(&pred, &y)?);
    }
    Ok(acc.scaled(1.0 / idx.len().max(1) as f64))
}

/// Trains a fresh backbone on `examples` and returns the parameters from
/// the epoch with the lowest validation loss.
pub fn train_backbone(
    examples: &[Example],
    channels: usize,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainedBackbone> {
    cfg.validate()?;
    let subjects: std::collections::BTreeSet<usize> = examples.iter().map(|e| e.subject).collect();
    if subjects.len() < 2 {
        return Err(NnError::Invalid("backbone training needs at least two subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split_rng = rng.clone();
    split_rng.set_stream(1);
    let mut dropout_rng = rng.clone();
    dropout_rng.set_stream(2);
    let (train_idx, val_idx) = stratified_split(examples, cfg.val_fraction, &mut split_rng)?;
    let model = EncoderDecoder::new(channels, arch, &mut rng)?;
    train_on_split(model, examples, train_idx, val_idx, cfg, weights, &mut rng, &mut dropout_rng)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_on_split(
    mut model: EncoderDecoder,
    examples: &[Example],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    order_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<TrainedBackbone> {
    let mut loss = Loss::new(*weights)?;
    let mut opt = Adam::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.snapshot();
    let mut log = vec![EpochLog {
        epoch: 0,
        train: mean_loss(&model, &mut loss, examples, &train_idx, cfg.batch_size)?,
        val: mean_loss(&model, &mut loss, examples, &val_idx, cfg.batch_size)?,
    }];
    let mut order = train_idx.clone();
    let mut stopped_epoch = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(order_rng);
        let mut acc = LossTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = batch_tensors(examples, chunk)?;
            model.zero_grad();
            let pred = model.forward(&x, Mode::Train, dropout_rng)?;
            let (terms, grad) = loss.terms_and_grad(&pred, &y)?;
            model.backward(&grad)?;
            opt.step(&mut model.params_mut())?;
            acc = acc.add(&terms);
        }
        let val = mean_loss(&model, &mut loss, examples, &val_idx, cfg.batch_size)?;
        log.push(EpochLog {
            epoch,
            train: acc.scaled(1.0 / order.len() as f64),
            val,
        });
        stopped_epoch = epoch;
        log::debug!("epoch {epoch}: train {:.4} val {:.4}", acc.total / order.len() as f64, val.total);
        match stopper.observe(epoch, val.total) {
            Verdict::Improved => best = model.snapshot(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    model.restore(&best)?;
    Ok(TrainedBackbone {
        model,
        log,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
        train_idx,
        val_idx,
    })
}

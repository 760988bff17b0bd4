use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::combined_loss;
use super::metrics::{class_scores, mean_std, ClassScore};
use super::optim::{cosine_lr, Adam};
use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::segnet::{argmax_mask, SegModel};

fn default_val_fraction() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub w_ce: f64,
    pub w_dice: f64,
    pub folds: usize,
    /// Share of each fold's training portion held out for early stopping.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "yes")]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 1e-5,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            w_ce: 0.5,
            w_dice: 0.5,
            folds: 5,
            val_fraction: 0.2,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            p.push(format!("train.lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            p.push("train.max_epochs must be positive".into());
        }
        if self.patience == 0 {
            p.push("train.patience must be >= 1".into());
        }
        if self.w_ce < 0.0 || self.w_dice < 0.0 || (self.w_ce + self.w_dice - 1.0).abs() > 1e-9 {
            p.push(format!(
                "train loss weights must be non-negative and sum to 1, got {} + {}",
                self.w_ce, self.w_dice
            ));
        }
        if self.folds < 2 {
            p.push(format!("train.folds must be >= 2, got {}", self.folds));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            p.push(format!("train.val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Independent stream for `(seed, purpose, index)` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_MODEL: u64 = 1;
pub const SEED_TRAIN: u64 = 2;
pub const SEED_HOLDOUT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
    pub hd95: f64,
    pub classes: Vec<ClassScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub dice_mean: f64,
    pub hd95_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
    pub per_class: Vec<ClassSummary>,
    pub samples: Vec<SampleScore>,
}

impl EvalSummary {
    /// Summary carrying only a Dice value, for injected validators.
    pub fn with_dice(dice: f64) -> Self {
        Self {
            loss: 0.0,
            dice_mean: dice,
            dice_std: 0.0,
            hd95_mean: 0.0,
            hd95_std: 0.0,
            per_class: Vec::new(),
            samples: Vec::new(),
        }
    }
}

/// Loss and metrics of `model` evaluated with the parameter values in `ps`.
pub fn evaluate(model: &SegModel<f32>, ps: &ParamStore<f32>, samples: &[&Sample], cfg: &TrainConfig) -> Result<EvalSummary> {
    let k = model.config.classes;
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.forward_with(ps, &s.image.to_tensor())?;
        loss += combined_loss(&logits, &s.mask.data, cfg.w_ce, cfg.w_dice)?.item() as f64;
        let pred = argmax_mask(&logits);
        let (classes, dice, hd95) = class_scores(&pred, &s.mask.data, s.mask.height, s.mask.width, k);
        scores.push(SampleScore {
            id: s.id.clone(),
            dice,
            hd95,
            classes,
        });
    }
    Ok(summarize(loss / samples.len().max(1) as f64, scores))
}

fn summarize(loss: f64, samples: Vec<SampleScore>) -> EvalSummary {
    let dice: Vec<f64> = samples.iter().map(|s| s.dice).collect();
    let hd: Vec<f64> = samples.iter().map(|s| s.hd95).collect();
    let (dice_mean, dice_std) = mean_std(&dice);
    let (hd95_mean, hd95_std) = mean_std(&hd);
    let n_classes = samples.first().map_or(0, |s| s.classes.len());
    let per_class = (0..n_classes)
        .map(|c| ClassSummary {
            class: samples[0].classes[c].class,
            dice_mean: mean_std(&samples.iter().map(|s| s.classes[c].dice).collect::<Vec<_>>()).0,
            hd95_mean: mean_std(&samples.iter().map(|s| s.classes[c].hd95).collect::<Vec<_>>()).0,
        })
        .collect();
    EvalSummary {
        loss,
        dice_mean,
        dice_std,
        hd95_mean,
        hd95_std,
        per_class,
        samples,
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub epochs: Vec<EpochRecord>,
    pub test: EvalSummary,
    /// SHA-256 of the restored best-epoch parameters.
    pub param_checksum: String,
}

impl FoldReport {
    pub fn dice(&self) -> (f64, f64) {
        (self.test.dice_mean, self.test.dice_std)
    }

    pub fn hd95(&self) -> (f64, f64) {
        (self.test.hd95_mean, self.test.hd95_std)
    }
}

pub struct FoldData<'a> {
    pub train: Vec<&'a Sample>,
    pub val: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
}

/// Trains with early stopping on validation Dice, restores the best epoch and scores the test set.
pub fn train_fold(model: &mut SegModel<f32>, data: &FoldData<'_>, cfg: &TrainConfig, fold: usize) -> Result<FoldReport> {
    train_fold_with(model, data, cfg, fold, |m, ps, val| evaluate(m, ps, val, cfg))
}

/// As [`train_fold`], with the per-epoch validation supplied by the caller.
pub fn train_fold_with<V>(
    model: &mut SegModel<f32>,
    data: &FoldData<'_>,
    cfg: &TrainConfig,
    fold: usize,
    mut validate: V,
) -> Result<FoldReport>
where
    V: FnMut(&SegModel<f32>, &ParamStore<f32>, &[&Sample]) -> Result<EvalSummary>,
{
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Invalid(format!(
            "fold {fold} needs training and validation samples ({} / {})",
            data.train.len(),
            data.val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_TRAIN, fold as u64));
    let mut opt = Adam::new(&model.params);
    let batches = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = batches * cfg.max_epochs;
    let mut step = 0;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Vec<Vec<f32>> = Vec::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let at = || format!("fold {fold}, epoch {epoch}, batch {}", b + 1);
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = if cfg.augment {
                    augment(data.train[i], &mut rng)
                } else {
                    data.train[i].clone()
                };
                let logits = model.forward(&s.image.to_tensor()).map_err(|e| diverged(e, &at()))?;
                let loss = combined_loss(&logits, &s.mask.data, cfg.w_ce, cfg.w_dice)
                    .and_then(|l| l.scale(1.0 / chunk.len() as f64))
                    .map_err(|e| diverged(e, &at()))?;
                batch_loss += loss.item() as f64;
                loss.backward()?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!("{}: loss is {batch_loss}", at())));
            }
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)?;
            opt.step(&mut model.params, lr)?;
            step += 1;
            loss_sum += batch_loss * chunk.len() as f64;
        }

        let frozen = model.frozen_params();
        let val = validate(model, &frozen, &data.val).map_err(|e| e.context(format!("fold {fold}, epoch {epoch}, validation")))?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            val_loss: val.loss,
            val_dice: val.dice_mean,
        });
        log::info!(
            "fold {fold} epoch {epoch}: lr {lr:.2e} train loss {:.4} val loss {:.4} val dice {:.4}",
            loss_sum / data.train.len() as f64,
            val.loss,
            val.dice_mean
        );
        let decision = stopper.observe(epoch, val.dice_mean);
        if decision.improved {
            best = model.params.iter().map(|p| p.tensor.data().to_vec()).collect();
        }
        if decision.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let ids: Vec<_> = model.params.ids().collect();
    for (id, values) in ids.into_iter().zip(best) {
        model.params.set(id, values)?;
    }
    let frozen = model.frozen_params();
    let test = evaluate(model, &frozen, &data.test, cfg).map_err(|e| e.context(format!("fold {fold}, test")))?;
    Ok(FoldReport {
        fold,
        train_size: data.train.len(),
        val_size: data.val.len(),
        test_size: data.test.len(),
        best_epoch: stopper.best_epoch,
        best_val_dice: stopper.best.unwrap_or(f64::NAN),
        stopped_early,
        epochs,
        test,
        param_checksum: model.params.checksum(),
    })
}

fn diverged(e: Error, at: &str) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("{at}: non-finite value in {op}")),
        Error::Context { source, at: inner } if matches!(*source, Error::NonFinite { .. }) => {
            Error::Diverged(format!("{at}, {inner}: {source}"))
        }
        other => other.context(at.to_string()),
    }
}

/// Mean and std across folds of the per-fold test means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
}

pub fn aggregate(reports: &[FoldReport]) -> Aggregate {
    let dice: Vec<f64> = reports.iter().map(|r| r.test.dice_mean).collect();
    let hd: Vec<f64> = reports.iter().map(|r| r.test.hd95_mean).collect();
    let (dice_mean, dice_std) = mean_std(&dice);
    let (hd95_mean, hd95_std) = mean_std(&hd);
    Aggregate {
        folds: reports.len(),
        dice_mean,
        dice_std,
        hd95_mean,
        hd95_std,
    }
}

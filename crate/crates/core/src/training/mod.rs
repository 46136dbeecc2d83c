//! Objective, optimizer, initialization and the training loop.

pub mod adadelta;

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce, Graph, ParamStore, Tensor};
use crate::dataset::NUM_CHOICES;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::features::EncodedInstance;
use crate::model::{batch_loss, mask_batch, MaskConfig, ModelParams};

pub use adadelta::{adadelta_step, Adadelta, AdadeltaConfig, AdadeltaState};

/// `count` draws uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, count: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// `fan_out x fan_in` weight matrix.
pub fn glorot_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::from_vec(fan_out, fan_in, glorot_uniform(fan_in, fan_out, fan_in * fan_out, rng))
}

/// Clamped binary cross-entropy of one score.
pub fn bce_loss(s: f64, y: f64) -> f64 {
    bce(s, y)
}

/// Mean of [`bce_loss`] over `(score, label)` pairs.
pub fn mean_bce(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(s, y)| bce_loss(s, y)).sum::<f64>() / pairs.len() as f64
}

/// Number of extra negatives per question for `ratio`, rounding half up.
pub fn extra_negatives(ratio: f64) -> usize {
    (ratio * NUM_CHOICES as f64 + 0.5).floor() as usize
}

/// Append extra incorrect candidates to every question, drawn uniformly from
/// the original candidates of the other questions in the batch. Strings equal
/// to one of the question's own candidates are never drawn; when nothing is
/// eligible the question gets fewer extras.
pub fn augment_batch<R: Rng + ?Sized>(batch: &mut [EncodedInstance], ratio: f64, rng: &mut R) -> Result<()> {
    if !ratio.is_finite() || ratio < 0.0 {
        return Err(Error::Config(format!("aug_ratio must be a finite value >= 0, got {ratio}")));
    }
    let extra = extra_negatives(ratio);
    if extra == 0 {
        return Ok(());
    }
    if batch.len() < 2 {
        return Err(Error::Config("augmentation needs at least 2 questions per batch".into()));
    }
    let pool: Vec<(usize, crate::features::Candidate)> = batch
        .iter()
        .enumerate()
        .flat_map(|(q, inst)| inst.choices.iter().take(NUM_CHOICES).map(move |c| (q, c.clone())))
        .collect();
    for (q, inst) in batch.iter_mut().enumerate() {
        let own: HashSet<&str> = inst.choices.iter().take(NUM_CHOICES).map(|c| c.text.as_str()).collect();
        let eligible: Vec<&crate::features::Candidate> = pool
            .iter()
            .filter(|(o, c)| *o != q && !own.contains(c.text.as_str()))
            .map(|(_, c)| c)
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let picks: Vec<_> = (0..extra).map(|_| eligible[rng.gen_range(0..eligible.len())].clone()).collect();
        inst.choices.extend(picks);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub aug_ratio: f64,
    pub mask: MaskConfig,
    pub seed: u64,
    pub adadelta: AdadeltaConfig,
    /// Fraction of the training split used, drawn once per run.
    pub train_fraction: f64,
    /// Record wall-clock seconds in the history.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            max_epochs: 100,
            patience: 5,
            aug_ratio: 0.0,
            mask: MaskConfig::NONE,
            seed: 0,
            adadelta: AdadeltaConfig::default(),
            train_fraction: 1.0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !self.aug_ratio.is_finite() || self.aug_ratio < 0.0 {
            return Err(Error::Config(format!("aug_ratio must be >= 0, got {}", self.aug_ratio)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1], got {}", self.train_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over every (candidate, label) pair of the epoch.
    pub train_loss: f64,
    pub val_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_instances: usize,
}

impl TrainOutcome {
    /// History as newline-delimited JSON.
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    rng_stream(seed, 0)
}

/// Seeded generator for evaluation-time masking.
pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

/// Train `params` in place. On return they hold the snapshot of the epoch
/// with the best validation accuracy (earliest on ties).
pub fn train(
    cfg: &TrainConfig,
    params: &mut ModelParams,
    train_set: &[EncodedInstance],
    val_set: &[EncodedInstance],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let mut subset: Vec<usize> = (0..train_set.len()).collect();
    if cfg.train_fraction < 1.0 {
        subset.shuffle(&mut rng_stream(cfg.seed, 2));
        let keep = ((cfg.train_fraction * train_set.len() as f64).ceil() as usize).max(1);
        subset.truncate(keep);
        subset.sort_unstable();
    }
    let mut rng = rng_stream(cfg.seed, 1);
    let mut opt = Adadelta::new(cfg.adadelta);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order = subset.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pairs) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<EncodedInstance> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            mask_batch(&mut batch, cfg.mask, &mut rng);
            if batch.len() >= 2 {
                augment_batch(&mut batch, cfg.aug_ratio, &mut rng)?;
            }
            let mut g = Graph::new();
            let (loss, _) = batch_loss(&mut g, params, &batch)?;
            g.forward(params)?;
            let l = g.scalar(loss)?;
            if !l.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {}", b + 1)));
            }
            let n: usize = batch.iter().map(|i| i.choices.len()).sum();
            loss_sum += l * n as f64;
            pairs += n;
            for id in params.param_ids() {
                params.param_mut(id).zero_grad();
            }
            g.backward(params, loss, 1.0)?;
            opt.step(params).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                other => other,
            })?;
        }
        let val_accuracy = accuracy(params, val_set, cfg.mask, eval_seed(cfg.seed))?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / pairs as f64,
            val_accuracy,
            wall_time_s: cfg.record_time.then(|| start.elapsed().as_secs_f64()),
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_accuracy, snapshot) = best.expect("at least one epoch ran");
    *params = snapshot;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_accuracy,
        train_instances: subset.len(),
    })
}

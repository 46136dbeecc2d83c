//! A full run: word tables, encoding, training and evaluation.

use serde::{Deserialize, Serialize};

use crate::dataset::{Instance, ZeroShotSplits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::{build_tables, EncodedInstance, Encoder, FeatureConfig, Stores, TableReport};
use crate::model::{Checkpoint, Interaction, ModelConfig, ModelParams};
use crate::training::{eval_seed, init_rng, train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub hidden: usize,
    pub hidden2: usize,
    pub interaction: Interaction,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            features: FeatureConfig::default(),
            hidden: 2048,
            hidden2: 2048,
            interaction: Interaction::Multiplicative,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub tables: TableReport,
}

/// Encode `split` with the tables held by `params`.
pub fn encode_split(
    features: &FeatureConfig,
    params: &ModelParams,
    dataset: &[Instance],
    splits: &ZeroShotSplits,
    split: &[Instance],
    stores: &Stores,
) -> Result<Vec<EncodedInstance>> {
    let tables = params
        .tables()
        .ok_or_else(|| Error::State("model has no word tables".into()))?;
    let encoder = Encoder::new(features.clone(), dataset)?;
    encoder.encode_all(split, |i| splits.flags(&i.id), tables, stores)
}

pub fn train_run(cfg: &RunConfig, dataset: &[Instance], splits: &ZeroShotSplits, stores: &Stores) -> Result<TrainedRun> {
    cfg.features.validate()?;
    cfg.train.validate()?;
    let encoder = Encoder::new(cfg.features.clone(), dataset)?;
    let mut rng = init_rng(cfg.train.seed);
    let (tables, report) = build_tables(&encoder, dataset, &splits.train, stores, &mut rng)?;
    let (q_dim, i_dim, a_dim) = encoder.input_dims(&tables, stores);
    let model = ModelConfig { q_dim, i_dim, a_dim, hidden: cfg.hidden, hidden2: cfg.hidden2, interaction: cfg.interaction };
    let mut params = ModelParams::init(model, Some(tables), &mut rng)?;
    let train_set = encode_split(&cfg.features, &params, dataset, splits, &splits.train, stores)?;
    let val_set = encode_split(&cfg.features, &params, dataset, splits, &splits.val, stores)?;
    let outcome = train(&cfg.train, &mut params, &train_set, &val_set)?;
    Ok(TrainedRun {
        checkpoint: Checkpoint { params, features: cfg.features.clone(), mask: cfg.train.mask },
        outcome,
        tables: report,
    })
}

/// Evaluate a checkpoint on `split` with its stored masking.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    dataset: &[Instance],
    splits: &ZeroShotSplits,
    split: &[Instance],
    stores: &Stores,
    seed: u64,
) -> Result<EvalReport> {
    let enc = encode_split(&ck.features, &ck.params, dataset, splits, split, stores)?;
    evaluate(&ck.params, &enc, ck.mask, eval_seed(seed))
}

//! One independent training per value of a single configuration axis.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Instance, ZeroShotSplits};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::features::Stores;
use crate::model::{Interaction, MaskConfig};
use crate::run::{evaluate_checkpoint, train_run, RunConfig};
use crate::textproc::StemAlgorithm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EmbeddingDim,
    FinetuneLr,
    StemAlgorithm,
    ExemplarK,
    DetectionThreshold,
    AugRatio,
    InteractionMode,
    MaskConfig,
    TrainFraction,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 9] = [
        SweepAxis::EmbeddingDim,
        SweepAxis::FinetuneLr,
        SweepAxis::StemAlgorithm,
        SweepAxis::ExemplarK,
        SweepAxis::DetectionThreshold,
        SweepAxis::AugRatio,
        SweepAxis::InteractionMode,
        SweepAxis::MaskConfig,
        SweepAxis::TrainFraction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::EmbeddingDim => "embedding_dim",
            SweepAxis::FinetuneLr => "finetune_lr",
            SweepAxis::StemAlgorithm => "stem_algorithm",
            SweepAxis::ExemplarK => "exemplar_k",
            SweepAxis::DetectionThreshold => "detection_threshold",
            SweepAxis::AugRatio => "aug_ratio",
            SweepAxis::InteractionMode => "interaction_mode",
            SweepAxis::MaskConfig => "mask_config",
            SweepAxis::TrainFraction => "train_fraction",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s || a.as_str().replace('_', "-") == s)
            .ok_or_else(|| {
                let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown sweep axis '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

fn num<T: FromStr>(axis: SweepAxis, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for axis {axis}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub base: RunConfig,
    /// Pretrained vector file for the embedding_dim axis; `{dim}` is
    /// replaced by the value. Without it, learned tables of that size.
    pub pretrained_template: Option<String>,
}

impl SweepSpec {
    /// Configuration of run `index`, seeded `base seed + index`.
    pub fn configure(&self, index: usize) -> Result<RunConfig> {
        let v = self.values.get(index).ok_or_else(|| Error::Config(format!("no sweep value {index}")))?;
        let mut cfg = self.base.clone();
        cfg.train.seed = self.base.train.seed.wrapping_add(index as u64);
        let axis = self.axis;
        match axis {
            SweepAxis::EmbeddingDim => {
                let d: usize = num(axis, v)?;
                cfg.features.embedding_dim = d;
                if let Some(t) = &self.pretrained_template {
                    cfg.features.pretrained = Some(t.replace("{dim}", &d.to_string()).into());
                }
            }
            SweepAxis::FinetuneLr => cfg.features.finetune_lr = num(axis, v)?,
            SweepAxis::StemAlgorithm => {
                let on = v != "none";
                if on {
                    cfg.features.stem_algorithm = v.parse::<StemAlgorithm>()?;
                }
                cfg.features.stem_question = on;
                cfg.features.stem_answer = on;
            }
            SweepAxis::ExemplarK => cfg.features.exemplar_k = num(axis, v)?,
            SweepAxis::DetectionThreshold => cfg.features.detection_threshold = num(axis, v)?,
            SweepAxis::AugRatio => cfg.train.aug_ratio = num(axis, v)?,
            SweepAxis::InteractionMode => cfg.interaction = v.parse::<Interaction>()?,
            SweepAxis::MaskConfig => cfg.train.mask = v.parse::<MaskConfig>()?,
            SweepAxis::TrainFraction => cfg.train.train_fraction = num(axis, v)?,
        }
        cfg.features.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Every value parses and passes validation.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        (0..self.values.len()).try_for_each(|i| self.configure(i).map(drop))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// One line per value; failed runs carry the error and blank metrics.
    pub fn to_csv(&self) -> String {
        let mut out = format!("seed,status,best_epoch,val_accuracy,{}\n", EvalReport::csv_header(self.axis.as_str()));
        for r in &self.rows {
            let value = if r.value.contains(',') { format!("\"{}\"", r.value) } else { r.value.clone() };
            match &r.report {
                Some(rep) => writeln!(
                    out,
                    "{},ok,{},{},{}",
                    r.seed,
                    r.best_epoch.map_or(String::new(), |e| e.to_string()),
                    r.val_accuracy.map_or(String::new(), |a| format!("{:.1}", 100.0 * a)),
                    rep.csv_row(&value)
                ),
                None => writeln!(out, "{},failed,,,{value}", r.seed),
            }
            .unwrap();
        }
        out
    }
}

/// Train and evaluate on `eval_split` once per value, in order. Failures of
/// individual runs are recorded and do not stop the sweep.
pub fn run_sweep(
    spec: &SweepSpec,
    dataset: &[Instance],
    splits: &ZeroShotSplits,
    eval_split: &[Instance],
    stores: &Stores,
) -> Result<SweepResult> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for (i, value) in spec.values.iter().enumerate() {
        let cfg = spec.configure(i)?;
        let mut row = SweepRow {
            value: value.clone(),
            seed: cfg.train.seed,
            best_epoch: None,
            val_accuracy: None,
            report: None,
            error: None,
        };
        let outcome = train_run(&cfg, dataset, splits, stores).and_then(|run| {
            let rep = evaluate_checkpoint(&run.checkpoint, dataset, splits, eval_split, stores, cfg.train.seed)?;
            Ok((run.outcome, rep))
        });
        match outcome {
            Ok((o, rep)) => {
                row.best_epoch = Some(o.best_epoch);
                row.val_accuracy = Some(o.best_val_accuracy);
                row.report = Some(rep);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(SweepResult { axis: spec.axis, rows })
}

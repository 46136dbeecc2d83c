//! Accuracy overall, on the zero-shot subsets and per question type.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QuestionType;
use crate::error::{Error, Result};
use crate::features::EncodedInstance;
use crate::model::{argmax, mask_batch, score_batch, MaskConfig, ModelParams};

const EVAL_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub correct: usize,
    pub count: usize,
    /// `None` for an empty subset.
    pub accuracy: Option<f64>,
}

impl SubsetAccuracy {
    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.correct += hit as usize;
    }

    fn finish(mut self) -> Self {
        self.accuracy = (self.count > 0).then(|| self.correct as f64 / self.count as f64);
        self
    }

    fn percent(&self) -> String {
        self.accuracy.map_or_else(String::new, |a| format!("{:.1}", 100.0 * a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    #[serde(rename = "type")]
    pub question_type: QuestionType,
    #[serde(flatten)]
    pub accuracy: SubsetAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: SubsetAccuracy,
    /// Unseen word in the question.
    pub zs_question: SubsetAccuracy,
    /// Unseen word in the correct answer.
    pub zs_answer: SubsetAccuracy,
    /// Unseen word in some incorrect answer.
    pub zs_choices: SubsetAccuracy,
    pub per_type: Vec<TypeAccuracy>,
}

impl EvalReport {
    /// Header for [`EvalReport::csv_row`]; `label` names the leading column.
    pub fn csv_header(label: &str) -> String {
        let mut h = label.to_owned();
        for c in ["all", "zs_question", "zs_answer", "zs_choices"] {
            write!(h, ",{c}").unwrap();
        }
        for t in QuestionType::ALL {
            write!(h, ",{}", t.as_str()).unwrap();
        }
        h + ",count,zs_question_count,zs_answer_count,zs_choices_count"
    }

    /// Accuracies as percentages with one decimal; empty subsets are blank.
    pub fn csv_row(&self, label: &str) -> String {
        let mut r = label.to_owned();
        for s in [&self.all, &self.zs_question, &self.zs_answer, &self.zs_choices] {
            write!(r, ",{}", s.percent()).unwrap();
        }
        for t in &self.per_type {
            write!(r, ",{}", t.accuracy.percent()).unwrap();
        }
        write!(
            r,
            ",{},{},{},{}",
            self.all.count, self.zs_question.count, self.zs_answer.count, self.zs_choices.count
        )
        .unwrap();
        r
    }
}

/// Build a report from predicted indices, one per instance.
pub fn report_from_predictions(instances: &[EncodedInstance], predictions: &[usize]) -> Result<EvalReport> {
    if instances.len() != predictions.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} instances",
            predictions.len(),
            instances.len()
        )));
    }
    let mut all = SubsetAccuracy::default();
    let (mut zq, mut za, mut zc) = (all, all, all);
    let mut types = [SubsetAccuracy::default(); QuestionType::ALL.len()];
    for (inst, &p) in instances.iter().zip(predictions) {
        let hit = p == inst.correct_index;
        all.add(hit);
        if inst.flags.in_question {
            zq.add(hit);
        }
        if inst.flags.in_correct {
            za.add(hit);
        }
        if inst.flags.in_other {
            zc.add(hit);
        }
        types[inst.question_type.index()].add(hit);
    }
    Ok(EvalReport {
        all: all.finish(),
        zs_question: zq.finish(),
        zs_answer: za.finish(),
        zs_choices: zc.finish(),
        per_type: QuestionType::ALL
            .iter()
            .zip(types)
            .map(|(&question_type, a)| TypeAccuracy { question_type, accuracy: a.finish() })
            .collect(),
    })
}

/// Predicted index for every instance. Masked channels are shuffled within
/// fixed-size batches using a generator seeded by `seed`.
pub fn predict_all(params: &ModelParams, split: &[EncodedInstance], mask: MaskConfig, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(split.len());
    for chunk in split.chunks(EVAL_BATCH) {
        let scores = if mask.is_none() {
            score_batch(params, chunk)?
        } else {
            let mut batch = chunk.to_vec();
            mask_batch(&mut batch, mask, &mut rng);
            score_batch(params, &batch)?
        };
        out.extend(scores.iter().map(|s| argmax(s)));
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams, split: &[EncodedInstance], mask: MaskConfig, seed: u64) -> Result<EvalReport> {
    report_from_predictions(split, &predict_all(params, split, mask, seed)?)
}

/// Overall accuracy, 0 for an empty split.
pub fn accuracy(params: &ModelParams, split: &[EncodedInstance], mask: MaskConfig, seed: u64) -> Result<f64> {
    let p = predict_all(params, split, mask, seed)?;
    let hits = split.iter().zip(&p).filter(|(i, &p)| i.correct_index == p).count();
    Ok(if split.is_empty() { 0.0 } else { hits as f64 / split.len() as f64 })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::dataset::ZsFlags;
    use crate::features::{Candidate, EncodedImage, EncodedText};
    use crate::embeddings::Bag;

    fn fake(rng: &mut ChaCha8Rng, i: usize) -> EncodedInstance {
        let text = || EncodedText { bag: Bag { entries: vec![] }, visual: None };
        EncodedInstance {
            id: format!("x{i}"),
            question_type: QuestionType::ALL[rng.gen_range(0..6)],
            question: text(),
            image: EncodedImage { cnn: vec![0.0].into(), detections: None },
            choices: (0..4).map(|c| Candidate { text: c.to_string(), enc: text() }).collect(),
            correct_index: rng.gen_range(0..4),
            flags: ZsFlags { in_question: rng.gen_bool(0.4), in_correct: rng.gen_bool(0.3), in_other: rng.gen_bool(0.5) },
        }
    }

    fn filtered(insts: &[EncodedInstance], preds: &[usize], keep: impl Fn(&EncodedInstance) -> bool) -> Option<f64> {
        let hits: Vec<bool> = insts
            .iter()
            .zip(preds)
            .filter(|(i, _)| keep(i))
            .map(|(i, &p)| i.correct_index == p)
            .collect();
        (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }

    #[test]
    fn perfect_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let insts: Vec<_> = (0..200).map(|i| fake(&mut rng, i)).collect();
        let preds: Vec<_> = insts.iter().map(|i| i.correct_index).collect();
        let r = report_from_predictions(&insts, &preds).unwrap();
        for s in [r.all, r.zs_question, r.zs_answer, r.zs_choices] {
            assert_eq!(s.accuracy, Some(1.0));
        }
        assert!(r.per_type.iter().all(|t| t.accuracy.accuracy.is_none_or(|a| a == 1.0)));
    }

    #[test]
    fn uniform_guessing_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let insts: Vec<_> = (0..10_000).map(|i| fake(&mut rng, i)).collect();
        let preds: Vec<_> = (0..insts.len()).map(|_| rng.gen_range(0..4)).collect();
        let a = report_from_predictions(&insts, &preds).unwrap().all.accuracy.unwrap();
        assert!((a - 0.25).abs() < 0.03, "{a}");
    }

    #[test]
    fn subsets_match_filtered_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..300);
            let insts: Vec<_> = (0..n).map(|i| fake(&mut rng, i)).collect();
            let preds: Vec<_> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let r = report_from_predictions(&insts, &preds).unwrap();
            assert_eq!(r.all.accuracy, filtered(&insts, &preds, |_| true));
            assert_eq!(r.zs_question.accuracy, filtered(&insts, &preds, |i| i.flags.in_question));
            assert_eq!(r.zs_answer.accuracy, filtered(&insts, &preds, |i| i.flags.in_correct));
            assert_eq!(r.zs_choices.accuracy, filtered(&insts, &preds, |i| i.flags.in_other));
            for t in &r.per_type {
                assert_eq!(t.accuracy.accuracy, filtered(&insts, &preds, |i| i.question_type == t.question_type));
                assert!(t.accuracy.count <= r.all.count);
            }
        }
    }

    #[test]
    fn csv_uses_one_decimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut insts: Vec<_> = (0..3).map(|i| fake(&mut rng, i)).collect();
        for i in &mut insts {
            i.question_type = QuestionType::What;
            i.flags = ZsFlags::default();
        }
        let preds = [insts[0].correct_index, insts[1].correct_index, (insts[2].correct_index + 1) % 4];
        let r = report_from_predictions(&insts, &preds).unwrap();
        let header = EvalReport::csv_header("run");
        let row = r.csv_row("a");
        assert_eq!(header.split(',').count(), row.split(',').count());
        assert!(row.starts_with("a,66.7,,,,66.7,"), "{row}");
        assert!(row.ends_with(",3,0,0,0"));
    }

    #[test]
    fn length_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let insts = vec![fake(&mut rng, 0)];
        assert!(report_from_predictions(&insts, &[]).is_err());
    }
}

use std::collections::HashSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Instance, QuestionType, ZeroShotSplits, ZsFlags};

/// Percentage rounded to one decimal.
pub(crate) fn percent(n: usize, d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    (1000.0 * n as f64 / d as f64).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeShare {
    #[serde(rename = "type")]
    pub question_type: QuestionType,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationCount {
    pub count: usize,
    pub percent_of_split: f64,
    /// Share among the instances with at least one unseen word.
    pub percent_of_zero_shot: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: String,
    pub questions: usize,
    pub images: usize,
    pub question_types: Vec<TypeShare>,
    /// Distinct words absent from training; `None` for the training split.
    pub unseen_words: Option<usize>,
    pub with_unseen: Option<LocationCount>,
    pub in_question: Option<LocationCount>,
    pub in_correct: Option<LocationCount>,
    pub in_other: Option<LocationCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStatistics {
    pub rows: Vec<SplitRow>,
    pub dropped: usize,
    pub dual_membership: usize,
}

fn row(name: &str, split: &[Instance], splits: &ZeroShotSplits, held_out: bool) -> SplitRow {
    let n = split.len();
    let images = split.iter().map(|i| i.image_id.as_str()).collect::<HashSet<_>>().len();
    let question_types = QuestionType::ALL
        .iter()
        .map(|&t| {
            let count = split.iter().filter(|i| i.question_type == t).count();
            TypeShare { question_type: t, count, percent: percent(count, n) }
        })
        .collect();
    if !held_out {
        return SplitRow {
            split: name.into(),
            questions: n,
            images,
            question_types,
            unseen_words: None,
            with_unseen: None,
            in_question: None,
            in_correct: None,
            in_other: None,
        };
    }
    let flags: Vec<ZsFlags> = split.iter().map(|i| splits.flags(&i.id)).collect();
    let zs = flags.iter().filter(|f| f.any()).count();
    let loc = |pred: fn(&ZsFlags) -> bool| {
        let count = flags.iter().filter(|f| pred(f)).count();
        Some(LocationCount {
            count,
            percent_of_split: percent(count, n),
            percent_of_zero_shot: percent(count, zs),
        })
    };
    SplitRow {
        split: name.into(),
        questions: n,
        images,
        question_types,
        unseen_words: Some(splits.unseen_words(split).len()),
        with_unseen: loc(ZsFlags::any),
        in_question: loc(|f| f.in_question),
        in_correct: loc(|f| f.in_correct),
        in_other: loc(|f| f.in_other),
    }
}

pub fn split_statistics(splits: &ZeroShotSplits) -> SplitStatistics {
    SplitStatistics {
        rows: vec![
            row("train", &splits.train, splits, false),
            row("val", &splits.val, splits, true),
            row("test", &splits.test, splits, true),
        ],
        dropped: splits.dropped.len(),
        dual_membership: splits.dual_membership,
    }
}

impl SplitStatistics {
    /// Fixed-width table, one column per split.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = 24;
        let _ = write!(out, "{:<38}", "");
        for r in &self.rows {
            let _ = write!(out, "{:>w$}", r.split);
        }
        out.push('\n');
        let line = |out: &mut String, label: &str, cell: &dyn Fn(&SplitRow) -> String| {
            let _ = write!(out, "{label:<38}");
            for r in &self.rows {
                let _ = write!(out, "{:>w$}", cell(r));
            }
            out.push('\n');
        };
        line(&mut out, "questions", &|r| r.questions.to_string());
        line(&mut out, "images", &|r| r.images.to_string());
        for (k, t) in QuestionType::ALL.iter().enumerate() {
            line(&mut out, &format!("type {t} (%)"), &|r| format!("{:.1}", r.question_types[k].percent));
        }
        line(&mut out, "words unseen in training", &|r| {
            r.unseen_words.map_or("-".into(), |n| n.to_string())
        });
        let loc = |l: &Option<LocationCount>, zs: bool| match l {
            None => "-".to_string(),
            Some(l) if zs => format!("{} ({:.1} | {:.1})", l.count, l.percent_of_split, l.percent_of_zero_shot),
            Some(l) => format!("{} ({:.1})", l.count, l.percent_of_split),
        };
        line(&mut out, "instances with >=1 unseen word", &|r| loc(&r.with_unseen, false));
        line(&mut out, "  in the question", &|r| loc(&r.in_question, true));
        line(&mut out, "  in the correct answer", &|r| loc(&r.in_correct, true));
        line(&mut out, "  in other (incorrect) choices", &|r| loc(&r.in_other, true));
        let _ = writeln!(out, "(location cells: count (% of split | % of zero-shot instances))");
        let _ = writeln!(out, "dropped (image overlap): {}", self.dropped);
        let _ = writeln!(out, "dual membership: {}", self.dual_membership);
        out
    }
}

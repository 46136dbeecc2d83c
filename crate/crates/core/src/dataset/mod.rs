//! Multiple-choice instances, zero-shot split construction and split
//! statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::{tokenize, Token};

mod split;
mod stats;

pub use split::{
    annotate, build_splits, select_heldout_words, DualMembership, SplitFiles, ZeroShotSplits, ZsFlags,
};
pub use stats::{split_statistics, LocationCount, SplitRow, SplitStatistics, TypeShare};

pub const NUM_CHOICES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    What,
    Where,
    When,
    Who,
    Why,
    How,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [
        QuestionType::What,
        QuestionType::Where,
        QuestionType::When,
        QuestionType::Who,
        QuestionType::Why,
        QuestionType::How,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::What => "what",
            QuestionType::Where => "where",
            QuestionType::When => "when",
            QuestionType::Who => "who",
            QuestionType::Why => "why",
            QuestionType::How => "how",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuestionType::ALL
            .into_iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown question type '{s}'")))
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One multiple-choice question about an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub image_id: String,
    pub question_type: QuestionType,
    pub question: Vec<Token>,
    pub choices: [Vec<Token>; NUM_CHOICES],
    pub correct_index: usize,
}

impl Instance {
    /// Every question and answer token, with repeats.
    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.question.iter().chain(self.choices.iter().flatten())
    }

    pub fn correct(&self) -> &[Token] {
        &self.choices[self.correct_index]
    }

    pub fn contains_any(&self, words: &HashSet<&str>) -> bool {
        self.tokens().any(|t| words.contains(t.as_str()))
    }
}

/// On-disk record, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub image_id: String,
    #[serde(rename = "type")]
    pub question_type: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
}

impl RawRecord {
    pub(crate) fn into_instance(self) -> std::result::Result<Instance, String> {
        if self.choices.len() != NUM_CHOICES {
            return Err(format!(
                "record '{}' has {} choices, expected {NUM_CHOICES}",
                self.id,
                self.choices.len()
            ));
        }
        if self.answer_index >= NUM_CHOICES {
            return Err(format!(
                "record '{}' has answer_index {} outside [0, 3]",
                self.id, self.answer_index
            ));
        }
        let question_type = self.question_type.parse::<QuestionType>().map_err(|e| e.to_string())?;
        let question = tokenize(&self.question);
        if question.is_empty() {
            return Err(format!("record '{}' has an empty question", self.id));
        }
        let mut it = self.choices.iter().map(|c| tokenize(c));
        let choices = std::array::from_fn(|_| it.next().unwrap_or_default());
        Ok(Instance {
            id: self.id,
            image_id: self.image_id,
            question_type,
            question,
            choices,
            correct_index: self.answer_index,
        })
    }
}

/// Read newline-delimited records. Ids must be unique.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(&name, lineno, e.to_string()))?;
        let inst = rec.into_instance().map_err(|m| Error::format(&name, lineno, m))?;
        if !seen.insert(inst.id.clone()) {
            return Err(Error::format(&name, lineno, format!("duplicate id '{}'", inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Occurrence counts over all question and answer tokens.
pub fn count_word_frequencies(dataset: &[Instance]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in dataset.iter().flat_map(Instance::tokens) {
        *counts.entry(t.as_str().to_owned()).or_insert(0) += 1;
    }
    counts
}

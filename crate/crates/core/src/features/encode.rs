use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{detection_bag, visual_embedding_pooled, ClassMode, ExemplarPooling, Stores};
use crate::autodiff::Tensor;
use crate::dataset::{Instance, QuestionType, ZsFlags};
use crate::embeddings::{init_learned, load_pretrained_grouped, read_glove, Bag, EmbeddingTable, KeyMode, Scope, Vocab};
use crate::error::{Error, Result};
use crate::textproc::{build_stem_map_with, tokenize, StemAlgorithm, StemMap, Token};

/// Which inputs are built and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Dimension of learned word embeddings (ignored with `pretrained`).
    pub embedding_dim: usize,
    /// GloVe text file for the word tables.
    pub pretrained: Option<PathBuf>,
    /// Relative learning rate of pretrained rows.
    pub finetune_lr: f64,
    /// One table for questions and answers.
    pub share_embeddings: bool,
    pub stem_question: bool,
    pub stem_answer: bool,
    pub stem_algorithm: StemAlgorithm,
    pub visual_question: bool,
    pub visual_answer: bool,
    pub exemplar_k: usize,
    pub exemplar_pooling: ExemplarPooling,
    pub detections: bool,
    pub detection_threshold: f64,
    pub class_mode: ClassMode,
    /// Dimension of learned class embeddings.
    pub class_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            embedding_dim: 300,
            pretrained: None,
            finetune_lr: 1.0,
            share_embeddings: false,
            stem_question: false,
            stem_answer: false,
            stem_algorithm: StemAlgorithm::Porter,
            visual_question: false,
            visual_answer: false,
            exemplar_k: 1,
            exemplar_pooling: ExemplarPooling::Flat,
            detections: false,
            detection_threshold: 0.5,
            class_mode: ClassMode::Learned,
            class_dim: 300,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrained.is_none() && self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.finetune_lr) {
            return Err(Error::Config(format!("finetune_lr {} outside [0, 1]", self.finetune_lr)));
        }
        if self.share_embeddings && self.stem_question != self.stem_answer {
            return Err(Error::Config(
                "a shared question/answer table needs the same stemming on both sides".into(),
            ));
        }
        if (self.visual_question || self.visual_answer) && self.exemplar_k == 0 {
            return Err(Error::Config("exemplar_k must be at least 1".into()));
        }
        if self.detections {
            if !(0.0..=1.0).contains(&self.detection_threshold) {
                return Err(Error::Config(format!(
                    "detection_threshold {} outside [0, 1]",
                    self.detection_threshold
                )));
            }
            if self.class_mode == ClassMode::Semantic && self.pretrained.is_none() {
                return Err(Error::Config("semantic class embeddings need pretrained vectors".into()));
            }
            if self.class_mode == ClassMode::Learned && self.class_dim == 0 {
                return Err(Error::Config("class_dim must be positive".into()));
            }
        }
        Ok(())
    }

    /// Check the stores this configuration reads from.
    pub fn validate_stores(&self, stores: &Stores) -> Result<()> {
        if self.visual_question || self.visual_answer {
            let ex = stores
                .exemplars
                .as_ref()
                .ok_or_else(|| Error::Config("visual embeddings need an exemplar store".into()))?;
            if self.exemplar_k > ex.max_k() {
                return Err(Error::Config(format!(
                    "exemplar_k {} exceeds the {} exemplars stored per word",
                    self.exemplar_k,
                    ex.max_k()
                )));
            }
        }
        if self.detections && stores.detections.is_none() {
            return Err(Error::Config("detection features need a detection store".into()));
        }
        Ok(())
    }
}

/// Word and class tables. Question and answer indices coincide when shared.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTables {
    pub tables: Vec<EmbeddingTable>,
    pub question: usize,
    pub answer: usize,
    pub class: Option<usize>,
}

impl WordTables {
    pub fn question(&self) -> &EmbeddingTable {
        &self.tables[self.question]
    }

    pub fn answer(&self) -> &EmbeddingTable {
        &self.tables[self.answer]
    }

    pub fn class(&self) -> Option<&EmbeddingTable> {
        self.class.map(|i| &self.tables[i])
    }

    pub fn is_shared(&self) -> bool {
        self.question == self.answer
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TableReport {
    pub question_rows: usize,
    pub answer_rows: usize,
    pub class_rows: usize,
    /// Keys that received a pretrained vector, out of those requested.
    pub pretrained_found: Option<usize>,
    pub pretrained_requested: Option<usize>,
}

/// A text span as a weighted row selection plus an optional constant part.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    pub bag: Bag,
    pub visual: Option<Arc<[f64]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub cnn: Arc<[f64]>,
    pub detections: Option<Bag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Normalized answer string, used to compare candidates.
    pub text: String,
    pub enc: EncodedText,
}

/// Model-ready form of an [`Instance`]. Candidates beyond the first four are
/// augmented negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstance {
    pub id: String,
    pub question_type: QuestionType,
    pub question: EncodedText,
    pub image: EncodedImage,
    pub choices: Vec<Candidate>,
    pub correct_index: usize,
    pub flags: ZsFlags,
}

impl EncodedInstance {
    pub fn label(&self, i: usize) -> f64 {
        if i == self.correct_index {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Question,
    Answer,
}

/// Turns instances into model inputs for a fixed configuration.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: FeatureConfig,
    stems: StemMap,
}

fn words(dataset: &[Instance]) -> BTreeSet<&str> {
    dataset.iter().flat_map(Instance::tokens).map(Token::as_str).collect()
}

impl Encoder {
    /// `dataset` fixes the stem map; pass the same instances at training and
    /// evaluation time.
    pub fn new(config: FeatureConfig, dataset: &[Instance]) -> Result<Self> {
        config.validate()?;
        let vocab: Vec<&str> = words(dataset).into_iter().collect();
        let stems = build_stem_map_with(&vocab, config.stem_algorithm.stemmer().as_ref());
        Ok(Encoder { config, stems })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    fn stemmed(&self, side: Side) -> bool {
        match side {
            Side::Question => self.config.stem_question,
            Side::Answer => self.config.stem_answer,
        }
    }

    fn key(&self, word: &str, side: Side) -> String {
        if self.stemmed(side) {
            self.stems.key(word).into_owned()
        } else {
            word.to_owned()
        }
    }

    fn keys(&self, tokens: &[Token], side: Side) -> Vec<String> {
        tokens.iter().map(|t| self.key(t.as_str(), side)).collect()
    }

    /// Lengths of x^Q, x^I and x^A.
    pub fn input_dims(&self, tables: &WordTables, stores: &Stores) -> (usize, usize, usize) {
        let ex = stores.exemplars.as_ref().map_or(0, |e| e.dim());
        let q = tables.question().dim() + if self.config.visual_question { ex } else { 0 };
        let a = tables.answer().dim() + if self.config.visual_answer { ex } else { 0 };
        let i = stores.images.dim() + tables.class().map_or(0, EmbeddingTable::dim);
        (q, i, a)
    }

    fn text(&self, tokens: &[Token], side: Side, tables: &WordTables, stores: &Stores) -> EncodedText {
        let table = match side {
            Side::Question => tables.question(),
            Side::Answer => tables.answer(),
        };
        let bag = table.mean_bag(&self.keys(tokens, side));
        let visual_on = match side {
            Side::Question => self.config.visual_question,
            Side::Answer => self.config.visual_answer,
        };
        let visual = match (&stores.exemplars, visual_on) {
            (Some(ex), true) => Some(Arc::from(visual_embedding_pooled(
                tokens,
                ex,
                self.config.exemplar_k,
                self.config.exemplar_pooling,
            ))),
            _ => None,
        };
        EncodedText { bag, visual }
    }

    pub fn encode(
        &self,
        inst: &Instance,
        flags: ZsFlags,
        tables: &WordTables,
        stores: &Stores,
    ) -> Result<EncodedInstance> {
        let cnn = stores.images.get(&inst.image_id)?.clone();
        let detections = match (tables.class(), &stores.detections) {
            (Some(t), Some(d)) => Some(detection_bag(
                d.get(&inst.image_id),
                self.config.detection_threshold,
                t,
                self.config.class_mode,
            )?),
            _ => None,
        };
        let choices = inst
            .choices
            .iter()
            .map(|c| Candidate {
                text: c.iter().map(Token::as_str).collect::<Vec<_>>().join(" "),
                enc: self.text(c, Side::Answer, tables, stores),
            })
            .collect();
        Ok(EncodedInstance {
            id: inst.id.clone(),
            question_type: inst.question_type,
            question: self.text(&inst.question, Side::Question, tables, stores),
            image: EncodedImage { cnn, detections },
            choices,
            correct_index: inst.correct_index,
            flags,
        })
    }

    /// Encode every instance, failing with the list of image ids that have
    /// no features.
    pub fn encode_all<F>(
        &self,
        split: &[Instance],
        flags: F,
        tables: &WordTables,
        stores: &Stores,
    ) -> Result<Vec<EncodedInstance>>
    where
        F: Fn(&Instance) -> ZsFlags,
    {
        let missing: BTreeSet<&str> = split
            .iter()
            .map(|i| i.image_id.as_str())
            .filter(|id| !stores.images.contains(id))
            .collect();
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(10).copied().collect();
            return Err(Error::Lookup(format!(
                "no image features for {} image(s): {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > 10 { ", ..." } else { "" }
            )));
        }
        split.iter().map(|i| self.encode(i, flags(i), tables, stores)).collect()
    }
}

/// Keys of `side` over `instances`, each with the surface forms mapping to it.
fn key_forms(encoder: &Encoder, instances: &[Instance], side: Side) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for inst in instances {
        let tokens: Vec<&Token> = match side {
            Side::Question => inst.question.iter().collect(),
            Side::Answer => inst.choices.iter().flatten().collect(),
        };
        for t in tokens {
            out.entry(encoder.key(t.as_str(), side))
                .or_default()
                .insert(t.as_str().to_owned());
        }
    }
    out
}

fn merge(a: &BTreeMap<String, BTreeSet<String>>, b: &BTreeMap<String, BTreeSet<String>>) -> BTreeMap<String, BTreeSet<String>> {
    let mut out = a.clone();
    for (k, v) in b {
        out.entry(k.clone()).or_default().extend(v.iter().cloned());
    }
    out
}

fn word_table<R: Rng + ?Sized>(
    encoder: &Encoder,
    name: &str,
    scope: Scope,
    stemmed: bool,
    learned_keys: &BTreeMap<String, BTreeSet<String>>,
    all_keys: &BTreeMap<String, BTreeSet<String>>,
    report: &mut TableReport,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    let cfg = encoder.config();
    let mut table = match &cfg.pretrained {
        None => {
            let keys: Vec<&String> = learned_keys.keys().collect();
            init_learned(&keys, cfg.embedding_dim, rng)?
        }
        Some(path) => {
            let groups: Vec<(String, Vec<String>)> = all_keys
                .iter()
                .map(|(k, forms)| (k.clone(), forms.iter().cloned().collect()))
                .collect();
            let load = load_pretrained_grouped(path, &groups)?;
            *report.pretrained_found.get_or_insert(0) += load.found;
            *report.pretrained_requested.get_or_insert(0) += load.requested;
            let mut t = load.table;
            t.set_relative_lr(cfg.finetune_lr)?;
            t
        }
    };
    table.parameter_mut().name = name.to_owned();
    table.set_scope(scope);
    table.set_key_mode(if stemmed { KeyMode::Stem } else { KeyMode::Surface });
    Ok(table)
}

fn class_table<R: Rng + ?Sized>(encoder: &Encoder, stores: &Stores, rng: &mut R) -> Result<EmbeddingTable> {
    let cfg = encoder.config();
    let names: Vec<String> = stores
        .detections
        .as_ref()
        .map(|d| d.class_names().into_iter().collect())
        .unwrap_or_default();
    let mut table = match (cfg.class_mode, &cfg.pretrained) {
        (ClassMode::Learned, _) | (ClassMode::Semantic, None) => init_learned(&names, cfg.class_dim, rng)?,
        (ClassMode::Semantic, Some(path)) => {
            let parts: Vec<Vec<String>> = names
                .iter()
                .map(|n| tokenize(n).into_iter().map(Token::into_string).collect())
                .collect();
            let wanted: HashSet<&str> = parts.iter().flatten().map(String::as_str).collect();
            let (dim, vectors) = read_glove(path, |w| wanted.contains(w))?;
            let missing: Vec<&str> = names
                .iter()
                .zip(&parts)
                .filter(|(_, ws)| ws.is_empty() || ws.iter().any(|w| !vectors.contains_key(w)))
                .map(|(n, _)| n.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "no pretrained vectors for classes: {}",
                    missing.join(", ")
                )));
            }
            let mut weights = Tensor::zeros(0, dim);
            for ws in &parts {
                let mut row = vec![0.0; dim];
                for w in ws {
                    row.iter_mut().zip(&vectors[w]).for_each(|(r, x)| *r += x);
                }
                row.iter_mut().for_each(|r| *r /= ws.len() as f64);
                weights.push_row(&row);
            }
            let mut t = EmbeddingTable::new("emb_class", Vocab::new(names.iter().cloned()), weights, KeyMode::Surface, Scope::Class)?;
            t.set_relative_lr(cfg.finetune_lr)?;
            t
        }
    };
    table.parameter_mut().name = "emb_class".into();
    table.set_scope(Scope::Class);
    Ok(table)
}

/// Build the word (and class) tables for a run.
///
/// Learned tables cover the training words only, so words first met at test
/// time map to nothing. Pretrained tables cover every word of `dataset` that
/// the vector file knows.
pub fn build_tables<R: Rng + ?Sized>(
    encoder: &Encoder,
    dataset: &[Instance],
    train: &[Instance],
    stores: &Stores,
    rng: &mut R,
) -> Result<(WordTables, TableReport)> {
    let cfg = encoder.config();
    cfg.validate_stores(stores)?;
    let mut report = TableReport::default();
    let q_learn = key_forms(encoder, train, Side::Question);
    let a_learn = key_forms(encoder, train, Side::Answer);
    let q_all = key_forms(encoder, dataset, Side::Question);
    let a_all = key_forms(encoder, dataset, Side::Answer);
    let mut tables = Vec::new();
    let (question, answer) = if cfg.share_embeddings {
        tables.push(word_table(
            encoder,
            "emb_shared",
            Scope::Shared,
            cfg.stem_question,
            &merge(&q_learn, &a_learn),
            &merge(&q_all, &a_all),
            &mut report,
            rng,
        )?);
        (0, 0)
    } else {
        tables.push(word_table(encoder, "emb_question", Scope::Question, cfg.stem_question, &q_learn, &q_all, &mut report, rng)?);
        tables.push(word_table(encoder, "emb_answer", Scope::Answer, cfg.stem_answer, &a_learn, &a_all, &mut report, rng)?);
        (0, 1)
    };
    let class = if cfg.detections {
        tables.push(class_table(encoder, stores, rng)?);
        Some(tables.len() - 1)
    } else {
        None
    };
    let t = WordTables { tables, question, answer, class };
    report.question_rows = t.question().len();
    report.answer_rows = t.answer().len();
    report.class_rows = t.class().map_or(0, EmbeddingTable::len);
    Ok((t, report))
}

//! Word embedding tables and bag-of-words pooling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::textproc::{StemMap, Token};
use crate::training::glorot_uniform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    #[default]
    Surface,
    Stem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Question,
    Answer,
    Shared,
    Class,
}

/// Ordered key set with O(1) lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Duplicate keys keep their first position.
    pub fn new<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::default();
        for k in keys {
            v.insert(k.into());
        }
        v
    }

    pub fn insert(&mut self, key: String) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.keys.len() - 1
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Weighted selection of table rows; the linear form of a pooled embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bag {
    pub entries: Vec<(usize, f64)>,
}

impl Bag {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocab,
    param: Parameter,
    key_mode: KeyMode,
    scope: Scope,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, vocab: Vocab, weights: Tensor, key_mode: KeyMode, scope: Scope) -> Result<Self> {
        if weights.rows() != vocab.len() {
            return Err(Error::Config(format!(
                "embedding table has {} keys but {} rows",
                vocab.len(),
                weights.rows()
            )));
        }
        if weights.cols() == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !weights.is_finite() {
            return Err(Error::Numerical("embedding table contains non-finite values".into()));
        }
        Ok(EmbeddingTable {
            vocab,
            param: Parameter::new(name, weights),
            key_mode,
            scope,
        })
    }

    pub fn dim(&self) -> usize {
        self.param.value.cols()
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn key_mode(&self) -> KeyMode {
        self.key_mode
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn set_key_mode(&mut self, mode: KeyMode) {
        self.key_mode = mode;
    }

    pub fn set_scope(&mut self, scope: Scope) {
        self.scope = scope;
    }

    pub fn trainable(&self) -> bool {
        self.param.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.param.trainable = trainable;
    }

    pub fn relative_lr(&self) -> f64 {
        self.param.relative_lr
    }

    pub fn set_relative_lr(&mut self, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("relative learning rate {lambda} outside [0, 1]")));
        }
        self.param.relative_lr = lambda;
        Ok(())
    }

    pub fn row(&self, key: &str) -> Option<&[f64]> {
        self.vocab.get(key).map(|i| self.param.value.row(i))
    }

    pub fn parameter(&self) -> &Parameter {
        &self.param
    }

    pub fn parameter_mut(&mut self) -> &mut Parameter {
        &mut self.param
    }

    /// Mean over the known words; unknown words are left out of the
    /// denominator too.
    pub fn mean_bag<S: AsRef<str>>(&self, words: &[S]) -> Bag {
        let rows: Vec<usize> = words.iter().filter_map(|w| self.vocab.get(w.as_ref())).collect();
        if rows.is_empty() {
            return Bag::default();
        }
        let w = 1.0 / rows.len() as f64;
        Bag {
            entries: rows.into_iter().map(|r| (r, w)).collect(),
        }
    }

    /// Sum over the known words.
    pub fn sum_bag<S: AsRef<str>>(&self, words: &[S]) -> Bag {
        Bag {
            entries: words
                .iter()
                .filter_map(|w| self.vocab.get(w.as_ref()))
                .map(|r| (r, 1.0))
                .collect(),
        }
    }

    pub fn materialize(&self, bag: &Bag) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &(r, w) in &bag.entries {
            for (o, e) in out.iter_mut().zip(self.param.value.row(r)) {
                *o += w * e;
            }
        }
        out
    }
}

/// Average embedding of the in-vocabulary words; zeros if there are none.
pub fn bow<S: AsRef<str>>(words: &[S], table: &EmbeddingTable) -> Vec<f64> {
    table.materialize(&table.mean_bag(words))
}

/// Keys under which `tokens` are looked up in `table`.
pub fn lookup_keys(tokens: &[Token], table: &EmbeddingTable, stem_map: &StemMap) -> Vec<String> {
    match table.key_mode() {
        KeyMode::Surface => tokens.iter().map(|t| t.as_str().to_owned()).collect(),
        KeyMode::Stem => tokens.iter().map(|t| stem_map.key(t.as_str()).into_owned()).collect(),
    }
}

/// Result of reading a GloVe file.
#[derive(Clone, Debug)]
pub struct PretrainedLoad {
    pub table: EmbeddingTable,
    /// Number of requested keys that received a vector.
    pub found: usize,
    pub requested: usize,
}

/// Raw vectors of a GloVe text file restricted to `wanted`.
///
/// Every line is validated: consistent dimension and finite decimal values.
pub fn read_glove<F>(path: &Path, mut wanted: F) -> Result<(usize, HashMap<String, Vec<f64>>)>
where
    F: FnMut(&str) -> bool,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut dim: Option<usize> = None;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let word = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::format(&name, lineno, format!("non-numeric field '{f}'"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::format(&name, lineno, "line has no vector values"));
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    &name,
                    lineno,
                    format!("expected {d} values, found {}", values.len()),
                ));
            }
            Some(_) => {}
        }
        if wanted(word) && !out.contains_key(word) {
            out.insert(word.to_owned(), values);
        }
    }
    let dim = dim.ok_or_else(|| Error::format(&name, 0, "file contains no vectors"))?;
    Ok((dim, out))
}

/// Load pretrained vectors for `vocab`; rows follow `vocab` order and only
/// words present in the file get a row.
pub fn load_pretrained<S: AsRef<str>>(path: &Path, vocab: &[S]) -> Result<PretrainedLoad> {
    let groups: Vec<(String, Vec<String>)> = vocab
        .iter()
        .map(|w| (w.as_ref().to_owned(), vec![w.as_ref().to_owned()]))
        .collect();
    load_pretrained_grouped(path, &groups)
}

/// Load pretrained vectors where each key's row is the mean of the vectors
/// of its listed surface forms. Used for stem keys (the stem itself is
/// rarely a dictionary word) and multi-word class names.
pub fn load_pretrained_grouped(path: &Path, groups: &[(String, Vec<String>)]) -> Result<PretrainedLoad> {
    let wanted: std::collections::HashSet<&str> = groups
        .iter()
        .flat_map(|(_, forms)| forms.iter().map(String::as_str))
        .collect();
    let (dim, vectors) = read_glove(path, |w| wanted.contains(w))?;
    let mut vocab = Vocab::default();
    let mut weights = Tensor::zeros(0, dim);
    for (key, forms) in groups {
        if vocab.get(key).is_some() {
            continue;
        }
        let found: Vec<&Vec<f64>> = forms.iter().filter_map(|f| vectors.get(f)).collect();
        if found.is_empty() {
            continue;
        }
        let mut row = vec![0.0; dim];
        for v in &found {
            for (r, x) in row.iter_mut().zip(v.iter()) {
                *r += x;
            }
        }
        let n = found.len() as f64;
        row.iter_mut().for_each(|r| *r /= n);
        vocab.insert(key.clone());
        weights.push_row(&row);
    }
    let found = vocab.len();
    let table = EmbeddingTable::new("pretrained", vocab, weights, KeyMode::Surface, Scope::Question)?;
    Ok(PretrainedLoad {
        table,
        found,
        requested: groups.len(),
    })
}

/// Learned table with Glorot-uniform rows, bound `sqrt(6 / (|vocab| + d))`.
pub fn init_learned<S: AsRef<str>, R: Rng + ?Sized>(vocab: &[S], d: usize, rng: &mut R) -> Result<EmbeddingTable> {
    if d == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let vocab = Vocab::new(vocab.iter().map(|s| s.as_ref().to_owned()));
    let n = vocab.len();
    let data = glorot_uniform(n.max(1), d, n * d, rng);
    EmbeddingTable::new("learned", vocab, Tensor::from_vec(n, d, data), KeyMode::Surface, Scope::Question)
}

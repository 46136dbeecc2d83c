//! Precomputed image features, object detections and word exemplars, and
//! the assembly of question, answer and image inputs.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embeddings::{Bag, EmbeddingTable};
use crate::error::{Error, Result};
use crate::jsonl::read_jsonl;

mod encode;

pub use encode::{
    build_tables, Candidate, EncodedImage, EncodedInstance, EncodedText, Encoder, FeatureConfig, TableReport,
    WordTables,
};

/// Default CNN feature dimension.
pub const CNN_DIM: usize = 2048;

fn check_vector(name: &str, line: usize, v: &[f64], dim: &mut Option<usize>) -> Result<()> {
    if v.is_empty() {
        return Err(Error::format(name, line, "empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(name, line, "non-finite value"));
    }
    match *dim {
        None => *dim = Some(v.len()),
        Some(d) if d != v.len() => {
            return Err(Error::format(name, line, format!("expected {d} values, found {}", v.len())));
        }
        Some(_) => {}
    }
    Ok(())
}

/// Global CNN features keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct ImageFeatureStore {
    dim: usize,
    vectors: HashMap<String, Arc<[f64]>>,
}

#[derive(Deserialize)]
struct FeatureRecord {
    id: String,
    v: Vec<f64>,
}

impl ImageFeatureStore {
    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut dim = None;
        let mut vectors = HashMap::new();
        read_jsonl(path, |line, r: FeatureRecord| {
            check_vector(&name, line, &r.v, &mut dim)?;
            if vectors.insert(r.id.clone(), Arc::from(r.v)).is_some() {
                return Err(Error::format(&name, line, format!("duplicate image id '{}'", r.id)));
            }
            Ok(())
        })?;
        let dim = dim.ok_or_else(|| Error::format(&name, 0, "no feature vectors"))?;
        Ok(ImageFeatureStore { dim, vectors })
    }

    pub fn from_vectors<I: IntoIterator<Item = (String, Vec<f64>)>>(items: I) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, (id, v)) in items.into_iter().enumerate() {
            check_vector("<memory>", i + 1, &v, &mut dim)?;
            vectors.insert(id, Arc::from(v));
        }
        let dim = dim.ok_or_else(|| Error::Config("image feature store is empty".into()))?;
        Ok(ImageFeatureStore { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&Arc<[f64]>> {
        self.vectors
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no image features for '{id}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_name: String,
    pub score: f64,
}

/// Detections per image. Images without a record have no detections.
#[derive(Clone, Debug, Default)]
pub struct DetectionStore {
    by_image: HashMap<String, Vec<Detection>>,
}

#[derive(Deserialize)]
struct DetectionRecord {
    image_id: String,
    detections: Vec<Detection>,
}

impl DetectionStore {
    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut by_image = HashMap::new();
        read_jsonl(path, |line, r: DetectionRecord| {
            if let Some(d) = r.detections.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
                return Err(Error::format(
                    &name,
                    line,
                    format!("detection score {} outside [0, 1]", d.score),
                ));
            }
            by_image.insert(r.image_id, r.detections);
            Ok(())
        })?;
        Ok(DetectionStore { by_image })
    }

    pub fn from_map(by_image: HashMap<String, Vec<Detection>>) -> Self {
        DetectionStore { by_image }
    }

    pub fn get(&self, image_id: &str) -> &[Detection] {
        self.by_image.get(image_id).map_or(&[], Vec::as_slice)
    }

    pub fn class_names(&self) -> BTreeSet<String> {
        self.by_image
            .values()
            .flatten()
            .map(|d| d.class_name.clone())
            .collect()
    }
}

/// Precomputed exemplar image features per word.
#[derive(Clone, Debug, Default)]
pub struct ExemplarStore {
    dim: usize,
    max_k: usize,
    by_word: HashMap<String, Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct ExemplarRecord {
    word: String,
    vectors: Vec<Vec<f64>>,
}

impl ExemplarStore {
    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut dim = None;
        let mut by_word = HashMap::new();
        read_jsonl(path, |line, r: ExemplarRecord| {
            for v in &r.vectors {
                check_vector(&name, line, v, &mut dim)?;
            }
            by_word.insert(r.word, r.vectors);
            Ok(())
        })?;
        let dim = dim.ok_or_else(|| Error::format(&name, 0, "no exemplar vectors"))?;
        Ok(Self::build(dim, by_word))
    }

    pub fn from_map(dim: usize, by_word: HashMap<String, Vec<Vec<f64>>>) -> Result<Self> {
        if let Some((w, _)) = by_word.iter().find(|(_, vs)| vs.iter().any(|v| v.len() != dim)) {
            return Err(Error::Config(format!("exemplar of '{w}' does not have dimension {dim}")));
        }
        Ok(Self::build(dim, by_word))
    }

    fn build(dim: usize, by_word: HashMap<String, Vec<Vec<f64>>>) -> Self {
        let max_k = by_word.values().map(Vec::len).max().unwrap_or(0);
        ExemplarStore { dim, max_k, by_word }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest number of exemplars stored for any word.
    pub fn max_k(&self) -> usize {
        self.max_k
    }

    pub fn get(&self, word: &str) -> &[Vec<f64>] {
        self.by_word.get(word).map_or(&[], Vec::as_slice)
    }
}

/// The three on-disk stores a run reads from.
#[derive(Clone, Debug, Default)]
pub struct Stores {
    pub images: ImageFeatureStore,
    pub detections: Option<DetectionStore>,
    pub exemplars: Option<ExemplarStore>,
}

impl Stores {
    pub fn open(images: &Path, detections: Option<&Path>, exemplars: Option<&Path>) -> Result<Self> {
        Ok(Stores {
            images: ImageFeatureStore::load(images)?,
            detections: detections.map(DetectionStore::load).transpose()?,
            exemplars: exemplars.map(ExemplarStore::load).transpose()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    /// A lookup row per class, trained from scratch.
    #[default]
    Learned,
    /// Pretrained word vectors of the class name.
    Semantic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarPooling {
    /// One mean over every retained vector.
    #[default]
    Flat,
    /// Mean per word, then mean over words.
    PerWord,
}

/// Summed class rows over detections scoring at least `threshold`.
///
/// In learned mode, classes missing from the table contribute nothing. In
/// semantic mode they are a configuration error.
pub fn detection_bag(
    detections: &[Detection],
    threshold: f64,
    class_table: &EmbeddingTable,
    mode: ClassMode,
) -> Result<Bag> {
    let kept: Vec<&Detection> = detections.iter().filter(|d| d.score >= threshold).collect();
    let mut missing: BTreeSet<&str> = BTreeSet::new();
    let mut entries = Vec::with_capacity(kept.len());
    for d in kept {
        match class_table.vocab().get(&d.class_name) {
            Some(r) => entries.push((r, 1.0)),
            None => {
                missing.insert(&d.class_name);
            }
        }
    }
    if mode == ClassMode::Semantic && !missing.is_empty() {
        let list: Vec<&str> = missing.into_iter().collect();
        return Err(Error::Config(format!(
            "no pretrained vectors for classes: {}",
            list.join(", ")
        )));
    }
    Ok(Bag { entries })
}

pub fn detection_bow(
    detections: &[Detection],
    threshold: f64,
    class_table: &EmbeddingTable,
    mode: ClassMode,
) -> Result<Vec<f64>> {
    Ok(class_table.materialize(&detection_bag(detections, threshold, class_table, mode)?))
}

/// Flat mean over the first `k` exemplars of every word in the store.
pub fn visual_embedding<S: AsRef<str>>(words: &[S], store: &ExemplarStore, k: usize) -> Vec<f64> {
    visual_embedding_pooled(words, store, k, ExemplarPooling::Flat)
}

pub fn visual_embedding_pooled<S: AsRef<str>>(
    words: &[S],
    store: &ExemplarStore,
    k: usize,
    pooling: ExemplarPooling,
) -> Vec<f64> {
    let mut out = vec![0.0; store.dim()];
    let mut groups = 0usize;
    let mut total = 0usize;
    let mut per_word = vec![0.0; store.dim()];
    for w in words {
        let vs = store.get(w.as_ref());
        let vs = &vs[..vs.len().min(k)];
        if vs.is_empty() {
            continue;
        }
        match pooling {
            ExemplarPooling::Flat => {
                for v in vs {
                    out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
                }
                total += vs.len();
            }
            ExemplarPooling::PerWord => {
                per_word.iter_mut().for_each(|x| *x = 0.0);
                for v in vs {
                    per_word.iter_mut().zip(v).for_each(|(o, x)| *o += x);
                }
                let n = vs.len() as f64;
                out.iter_mut().zip(&per_word).for_each(|(o, x)| *o += x / n);
                groups += 1;
            }
        }
    }
    let n = match pooling {
        ExemplarPooling::Flat => total,
        ExemplarPooling::PerWord => groups,
    };
    if n > 0 {
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::embeddings::{KeyMode, Scope, Vocab};

    fn class_table() -> EmbeddingTable {
        let mut t = Tensor::zeros(0, 2);
        t.push_row(&[1.0, 2.0]);
        t.push_row(&[-1.0, 0.5]);
        EmbeddingTable::new("c", Vocab::new(["dog", "cat"]), t, KeyMode::Surface, Scope::Class).unwrap()
    }

    fn det(c: &str, s: f64) -> Detection {
        Detection { class_name: c.into(), score: s }
    }

    #[test]
    fn detection_sum_semantics() {
        let t = class_table();
        assert_eq!(detection_bow(&[], 0.5, &t, ClassMode::Learned).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            detection_bow(&[det("dog", 0.9), det("cat", 0.1)], 0.5, &t, ClassMode::Learned).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            detection_bow(&[det("dog", 0.9), det("dog", 0.5)], 0.5, &t, ClassMode::Learned).unwrap(),
            vec![2.0, 4.0]
        );
    }

    #[test]
    fn semantic_mode_lists_missing_classes() {
        let t = class_table();
        let err = detection_bow(&[det("zebra", 0.9), det("yak", 0.9), det("dog", 1.0)], 0.5, &t, ClassMode::Semantic)
            .unwrap_err();
        assert!(err.to_string().contains("yak, zebra"), "{err}");
        // below threshold: not an error
        assert!(detection_bow(&[det("zebra", 0.1)], 0.5, &t, ClassMode::Semantic).is_ok());
    }

    #[test]
    fn threshold_monotone() {
        let t = class_table();
        let dets: Vec<Detection> = (0..20).map(|i| det(if i % 2 == 0 { "dog" } else { "cat" }, i as f64 / 19.0)).collect();
        let mut prev = usize::MAX;
        for k in 0..=20 {
            let n = detection_bag(&dets, k as f64 / 20.0, &t, ClassMode::Learned).unwrap().entries.len();
            assert!(n <= prev);
            prev = n;
        }
    }

    fn exemplars() -> ExemplarStore {
        let map: HashMap<String, Vec<Vec<f64>>> = [
            ("a".to_string(), vec![vec![1.0, 0.0]]),
            ("b".to_string(), vec![vec![0.0, 3.0], vec![2.0, 0.0], vec![9.0, 9.0]]),
        ]
        .into();
        ExemplarStore::from_map(2, map).unwrap()
    }

    #[test]
    fn visual_embedding_cases() {
        let s = exemplars();
        assert_eq!(s.max_k(), 3);
        assert_eq!(visual_embedding(&["zz"], &s, 2), vec![0.0, 0.0]);
        assert_eq!(visual_embedding(&["a"], &s, 1), vec![1.0, 0.0]);
        assert_eq!(visual_embedding(&["a", "b"], &s, 2), vec![1.0, 1.0]);
        assert_eq!(visual_embedding(&["b", "a"], &s, 2), vec![1.0, 1.0]);
        assert_eq!(
            visual_embedding_pooled(&["a", "b"], &s, 2, ExemplarPooling::PerWord),
            vec![1.0, 0.75]
        );
    }

    #[test]
    fn store_loading() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id": "i1", "v": [1, 2, 3]}}"#).unwrap();
        writeln!(f, r#"{{"id": "i2", "v": [1, 2]}}"#).unwrap();
        assert!(matches!(ImageFeatureStore::load(f.path()), Err(Error::Format { line: 2, .. })));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id": "i1", "v": [1, 2, 3]}}"#).unwrap();
        let s = ImageFeatureStore::load(f.path()).unwrap();
        assert_eq!(s.dim(), 3);
        let err = s.get("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"image_id": "i1", "detections": [{{"class": "dog", "score": 1.5}}]}}"#).unwrap();
        assert!(DetectionStore::load(f.path()).is_err());

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"word": "cat", "vectors": [[1, 2], [3, 4]]}}"#).unwrap();
        let e = ExemplarStore::load(f.path()).unwrap();
        assert_eq!((e.dim(), e.max_k()), (2, 2));
    }
}

//! Small generated datasets with image features, for tests, demos and the
//! CLI `synth` command.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::Serialize;

use crate::dataset::{write_records, Instance, QuestionType, RawRecord, NUM_CHOICES};
use crate::error::{Error, Result};
use crate::features::{ImageFeatureStore, Stores};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub records: Vec<RawRecord>,
    pub images: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SynthFiles {
    pub dataset: PathBuf,
    pub images: PathBuf,
}

#[derive(Serialize)]
struct FeatureLine<'a> {
    id: &'a str,
    v: &'a [f64],
}

impl SynthData {
    pub fn instances(&self) -> Result<Vec<Instance>> {
        self.records
            .iter()
            .map(|r| r.clone().into_instance().map_err(Error::Config))
            .collect()
    }

    pub fn stores(&self) -> Result<Stores> {
        Ok(Stores {
            images: ImageFeatureStore::from_vectors(self.images.iter().cloned())?,
            detections: None,
            exemplars: None,
        })
    }

    /// Write `dataset.jsonl` and `images.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dataset = dir.join("dataset.jsonl");
        write_records(&dataset, &self.records)?;
        let images = dir.join("images.jsonl");
        let mut w = BufWriter::new(File::create(&images).map_err(|e| Error::io(&images, e))?);
        for (id, v) in &self.images {
            let line = serde_json::to_string(&FeatureLine { id, v }).expect("features serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(&images, e))?;
        }
        w.flush().map_err(|e| Error::io(&images, e))?;
        Ok(SynthFiles { dataset, images })
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    // Sum of uniforms; close enough to normal for feature noise.
    (0..dim)
        .map(|_| scale * ((0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.866))
        .collect()
}

/// Four distinct indices below `n`, one of them `correct`, in random order.
/// Returns the order and the position of `correct`.
fn choice_set<R: Rng + ?Sized>(n: usize, correct: usize, rng: &mut R) -> ([usize; NUM_CHOICES], usize) {
    let mut set = [correct; NUM_CHOICES];
    let mut k = 1;
    while k < NUM_CHOICES {
        let c = rng.gen_range(0..n);
        if !set[..k].contains(&c) {
            set[k] = c;
            k += 1;
        }
    }
    set.shuffle(rng);
    let pos = set.iter().position(|&c| c == correct).expect("correct is present");
    (set, pos)
}

fn record(id: String, image_id: String, t: QuestionType, question: String, choices: Vec<String>, answer_index: usize) -> RawRecord {
    RawRecord { id, image_id, question_type: t.as_str().to_owned(), question, choices, answer_index }
}

/// `n` questions, each asking about its own word `wI`, whose correct answer
/// is that same word and whose distractors are other questions' words. Every
/// question has its own random image.
pub fn separable<R: Rng + ?Sized>(n: usize, image_dim: usize, rng: &mut R) -> Result<SynthData> {
    if n < NUM_CHOICES {
        return Err(Error::Config(format!("separable task needs at least {NUM_CHOICES} questions")));
    }
    let mut data = SynthData { records: Vec::with_capacity(n), images: Vec::with_capacity(n) };
    for i in 0..n {
        let (set, pos) = choice_set(n, i, rng);
        let image = format!("img{i}");
        data.records.push(record(
            format!("q{i}"),
            image.clone(),
            QuestionType::What,
            format!("w{i}"),
            set.iter().map(|c| format!("w{c}")).collect(),
            pos,
        ));
        data.images.push((image, gaussian_vec(rng, image_dim, 1.0)));
    }
    Ok(data)
}

/// Each image shows one of `concepts` classes: a fixed prototype plus
/// noise. The question is the same for every instance and the choices are
/// four distinct class names with the correct position uniform, so neither
/// the question nor the answers alone say anything about the label.
pub fn grounded<R: Rng + ?Sized>(n: usize, concepts: usize, image_dim: usize, noise: f64, rng: &mut R) -> Result<SynthData> {
    if concepts < NUM_CHOICES {
        return Err(Error::Config(format!("grounded task needs at least {NUM_CHOICES} concepts")));
    }
    let prototypes: Vec<Vec<f64>> = (0..concepts).map(|_| gaussian_vec(rng, image_dim, 1.0)).collect();
    let mut data = SynthData { records: Vec::with_capacity(n), images: Vec::with_capacity(n) };
    for i in 0..n {
        let c = rng.gen_range(0..concepts);
        let (set, pos) = choice_set(concepts, c, rng);
        let image = format!("img{i}");
        let v = prototypes[c].iter().zip(gaussian_vec(rng, image_dim, noise)).map(|(p, e)| p + e).collect();
        data.images.push((image.clone(), v));
        data.records.push(record(
            format!("q{i}"),
            image,
            QuestionType::What,
            "what is shown".into(),
            set.iter().map(|c| format!("concept{c}")).collect(),
            pos,
        ));
    }
    Ok(data)
}

/// Questions and answers drawn from a Zipf(1) vocabulary of `vocab` words,
/// several questions per image, mixed question types.
pub fn zipf_corpus<R: Rng + ?Sized>(n: usize, vocab: usize, n_images: usize, image_dim: usize, rng: &mut R) -> Result<SynthData> {
    if vocab == 0 || n_images == 0 {
        return Err(Error::Config("zipf corpus needs a vocabulary and images".into()));
    }
    let zipf = WeightedIndex::new((1..=vocab).map(|r| 1.0 / r as f64)).expect("positive weights");
    let words = |rng: &mut R, lo: usize, hi: usize| -> String {
        let len = rng.gen_range(lo..=hi);
        (0..len).map(|_| format!("t{}", zipf.sample(rng))).collect::<Vec<_>>().join(" ")
    };
    let mut data = SynthData { records: Vec::with_capacity(n), images: Vec::with_capacity(n_images) };
    for i in 0..n {
        let t = QuestionType::ALL[rng.gen_range(0..QuestionType::ALL.len())];
        let question = words(rng, 2, 5);
        let choices = (0..NUM_CHOICES).map(|_| words(rng, 1, 2)).collect();
        let image = format!("img{}", rng.gen_range(0..n_images));
        data.records.push(record(format!("q{i}"), image, t, question, choices, rng.gen_range(0..NUM_CHOICES)));
    }
    for k in 0..n_images {
        data.images.push((format!("img{k}"), gaussian_vec(rng, image_dim, 1.0)));
    }
    Ok(data)
}

/// Unrelated random words everywhere, correct position uniform.
pub fn balanced_random<R: Rng + ?Sized>(n: usize, vocab: usize, image_dim: usize, rng: &mut R) -> Result<SynthData> {
    if vocab < NUM_CHOICES {
        return Err(Error::Config(format!("random task needs at least {NUM_CHOICES} words")));
    }
    let mut data = SynthData { records: Vec::with_capacity(n), images: Vec::with_capacity(n) };
    for i in 0..n {
        let (set, _) = choice_set(vocab, rng.gen_range(0..vocab), rng);
        let image = format!("img{i}");
        data.records.push(record(
            format!("q{i}"),
            image.clone(),
            QuestionType::What,
            format!("r{} r{}", rng.gen_range(0..vocab), rng.gen_range(0..vocab)),
            set.iter().map(|c| format!("r{c}")).collect(),
            rng.gen_range(0..NUM_CHOICES),
        ));
        data.images.push((image, gaussian_vec(rng, image_dim, 1.0)));
    }
    Ok(data)
}

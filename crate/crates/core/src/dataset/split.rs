use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Instance;
use crate::error::{Error, Result};

/// Where an instance holding words from both reserved sets goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMembership {
    #[default]
    Test,
    Val,
}

/// Location of unseen words within an instance. The flags may overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZsFlags {
    pub in_question: bool,
    pub in_correct: bool,
    pub in_other: bool,
}

impl ZsFlags {
    pub fn any(&self) -> bool {
        self.in_question || self.in_correct || self.in_other
    }
}

pub fn annotate(instance: &Instance, unseen: &HashSet<&str>) -> ZsFlags {
    let hit = |tokens: &[crate::textproc::Token]| tokens.iter().any(|t| unseen.contains(t.as_str()));
    ZsFlags {
        in_question: hit(&instance.question),
        in_correct: hit(instance.correct()),
        in_other: instance
            .choices
            .iter()
            .enumerate()
            .any(|(i, c)| i != instance.correct_index && hit(c)),
    }
}

/// Pick two disjoint random subsets of the words seen fewer than
/// `threshold` times. `sizes = None` splits the whole pool in half.
pub fn select_heldout_words<R: Rng + ?Sized>(
    counts: &BTreeMap<String, usize>,
    threshold: usize,
    sizes: Option<(usize, usize)>,
    rng: &mut R,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut pool: Vec<&String> = counts.iter().filter(|(_, &c)| c < threshold).map(|(w, _)| w).collect();
    if pool.is_empty() {
        return Err(Error::Split(format!(
            "empty split: no word occurs fewer than {threshold} times, so val and test would have no instances"
        )));
    }
    let (n_val, n_test) = sizes.unwrap_or((pool.len() / 2, pool.len() - pool.len() / 2));
    if pool.len() < n_val + n_test {
        return Err(Error::Split(format!(
            "eligible pool has {} words with count < {threshold}, need {}",
            pool.len(),
            n_val + n_test
        )));
    }
    pool.shuffle(rng);
    let val = pool[..n_val].iter().map(|w| (*w).clone()).collect();
    let test = pool[n_val..n_val + n_test].iter().map(|w| (*w).clone()).collect();
    Ok((val, test))
}

/// Train/val/test partitions plus the reserved words and per-instance
/// unseen-word annotations for val and test.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotSplits {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
    pub heldout_val: BTreeSet<String>,
    pub heldout_test: BTreeSet<String>,
    /// Instances removed because their image is shared with val or test.
    pub dropped: Vec<String>,
    /// Instances that held words of both reserved sets.
    pub dual_membership: usize,
    pub annotations: BTreeMap<String, ZsFlags>,
}

/// Assign instances to splits.
///
/// Test takes every instance with a test-reserved word, val the remaining
/// ones with a val-reserved word, and train whatever is left whose image
/// does not appear in val or test. Annotations mark words absent from the
/// training vocabulary.
pub fn build_splits(
    dataset: &[Instance],
    heldout_val: &BTreeSet<String>,
    heldout_test: &BTreeSet<String>,
    dual: DualMembership,
) -> Result<ZeroShotSplits> {
    if let Some(w) = heldout_val.intersection(heldout_test).next() {
        return Err(Error::Config(format!("held-out sets overlap on '{w}'")));
    }
    let hv: HashSet<&str> = heldout_val.iter().map(String::as_str).collect();
    let ht: HashSet<&str> = heldout_test.iter().map(String::as_str).collect();

    let (mut val, mut test, mut rest) = (Vec::new(), Vec::new(), Vec::new());
    let mut dual_membership = 0;
    for inst in dataset {
        match (inst.contains_any(&hv), inst.contains_any(&ht)) {
            (true, true) => {
                dual_membership += 1;
                match dual {
                    DualMembership::Test => test.push(inst.clone()),
                    DualMembership::Val => val.push(inst.clone()),
                }
            }
            (false, true) => test.push(inst.clone()),
            (true, false) => val.push(inst.clone()),
            (false, false) => rest.push(inst),
        }
    }
    let held_images: HashSet<&str> = val.iter().chain(&test).map(|i| i.image_id.as_str()).collect();
    let mut train = Vec::new();
    let mut dropped = Vec::new();
    for inst in rest {
        if held_images.contains(inst.image_id.as_str()) {
            dropped.push(inst.id.clone());
        } else {
            train.push(inst.clone());
        }
    }
    for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
        if split.is_empty() {
            return Err(Error::Split(format!("empty split: {name} has no instances")));
        }
    }
    let mut splits = ZeroShotSplits {
        train,
        val,
        test,
        heldout_val: heldout_val.clone(),
        heldout_test: heldout_test.clone(),
        dropped,
        dual_membership,
        annotations: BTreeMap::new(),
    };
    splits.annotate_all();
    Ok(splits)
}

/// Paths written by [`ZeroShotSplits::write`].
#[derive(Clone, Debug, Serialize)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub meta: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitMeta {
    heldout_val: BTreeSet<String>,
    heldout_test: BTreeSet<String>,
    dropped: Vec<String>,
    dual_membership: usize,
    annotations: BTreeMap<String, ZsFlags>,
}

impl ZeroShotSplits {
    /// Distinct tokens of the training split.
    pub fn train_vocabulary(&self) -> HashSet<&str> {
        self.train.iter().flat_map(Instance::tokens).map(|t| t.as_str()).collect()
    }

    /// Distinct tokens of `split` that never occur in training.
    pub fn unseen_words<'a>(&self, split: &'a [Instance]) -> BTreeSet<&'a str> {
        let vocab = self.train_vocabulary();
        split
            .iter()
            .flat_map(Instance::tokens)
            .map(|t| t.as_str())
            .filter(|w| !vocab.contains(w))
            .collect()
    }

    fn annotate_all(&mut self) {
        let vocab = self.train_vocabulary();
        let mut annotations = BTreeMap::new();
        for inst in self.val.iter().chain(&self.test) {
            let unseen: HashSet<&str> = inst
                .tokens()
                .map(|t| t.as_str())
                .filter(|w| !vocab.contains(w))
                .collect();
            annotations.insert(inst.id.clone(), annotate(inst, &unseen));
        }
        self.annotations = annotations;
    }

    pub fn flags(&self, id: &str) -> ZsFlags {
        self.annotations.get(id).copied().unwrap_or_default()
    }

    /// Build from explicit id lists, e.g. the standard splits of a dataset.
    pub fn from_ids(
        dataset: &[Instance],
        train: &[String],
        val: &[String],
        test: &[String],
    ) -> Result<ZeroShotSplits> {
        let by_id: HashMap<&str, &Instance> = dataset.iter().map(|i| (i.id.as_str(), i)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Instance>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|i| (*i).clone())
                        .ok_or_else(|| Error::Lookup(format!("split references unknown instance id '{id}'")))
                })
                .collect()
        };
        let mut s = ZeroShotSplits {
            train: pick(train)?,
            val: pick(val)?,
            test: pick(test)?,
            heldout_val: BTreeSet::new(),
            heldout_test: BTreeSet::new(),
            dropped: Vec::new(),
            dual_membership: 0,
            annotations: BTreeMap::new(),
        };
        s.annotate_all();
        Ok(s)
    }

    /// Write `train.txt`, `val.txt`, `test.txt` (one id per line) and
    /// `split_meta.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SplitFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write_ids = |name: &str, split: &[Instance]| -> Result<PathBuf> {
            let p = dir.join(name);
            let mut s = String::new();
            for i in split {
                s.push_str(&i.id);
                s.push('\n');
            }
            fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        };
        let meta = SplitMeta {
            heldout_val: self.heldout_val.clone(),
            heldout_test: self.heldout_test.clone(),
            dropped: self.dropped.clone(),
            dual_membership: self.dual_membership,
            annotations: self.annotations.clone(),
        };
        let meta_path = dir.join("split_meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
        Ok(SplitFiles {
            train: write_ids("train.txt", &self.train)?,
            val: write_ids("val.txt", &self.val)?,
            test: write_ids("test.txt", &self.test)?,
            meta: meta_path,
        })
    }

    /// Read splits written by [`ZeroShotSplits::write`]. The sidecar is
    /// optional; without it, annotations are recomputed from the train
    /// vocabulary.
    pub fn read(dir: &Path, dataset: &[Instance]) -> Result<ZeroShotSplits> {
        let read_ids = |name: &str| -> Result<Vec<String>> {
            let p = dir.join(name);
            let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(s.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
        };
        let mut s = Self::from_ids(dataset, &read_ids("train.txt")?, &read_ids("val.txt")?, &read_ids("test.txt")?)?;
        let meta_path = dir.join("split_meta.json");
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: SplitMeta = serde_json::from_str(&text)
                .map_err(|e| Error::format(meta_path.display().to_string(), e.line(), e.to_string()))?;
            s.heldout_val = meta.heldout_val;
            s.heldout_test = meta.heldout_test;
            s.dropped = meta.dropped;
            s.dual_membership = meta.dual_membership;
            s.annotations = meta.annotations;
        }
        Ok(s)
    }
}
